import json
from pathlib import Path
from typing import Any

import pytest

from self_diffusion import runner
from self_diffusion.config import resolve
from self_diffusion.engine import SolveAborted
from self_diffusion.runner import MethodFailed, MethodSucceeded, run_experiment, run_sweep

from tests.util import tiny_cs_config


def test_run_writes_the_run_directory(tmp_path: Path) -> None:
    cfg = resolve(tiny_cs_config())
    outcome = run_experiment(cfg, out=tmp_path, workers=1)
    assert outcome.exit_code == 0
    run_dir = outcome.run_dir
    assert run_dir is not None and run_dir.parent == tmp_path
    assert run_dir.name.startswith("cs1d-")
    for name in ("config.resolved.json", "metrics.csv", "diagnostics.csv", "timings.csv", "penalty_profile.csv"):
        assert (run_dir / name).is_file(), name
    assert resolve(json.loads((run_dir / "config.resolved.json").read_text())) == cfg

    metrics = (run_dir / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "instance,method,status,psnr,nrmse"
    assert [line.split(",")[:3] for line in metrics[1:]] == [
        ["signal", "sdi", "ok"],
        ["signal", "dip", "ok"],
        ["signal", "admm-bp", "ok"],
    ]
    sdi_dir = run_dir / "sdi" / "signal"
    for name in ("reconstruction.sdt", "reconstruction.csv", "trace.csv", "spectrum.csv", "drift.csv", "spectral_convergence.csv"):
        assert (sdi_dir / name).is_file(), name
    snapshots = sorted(p.name for p in (sdi_dir / "snapshots").iterdir())
    assert snapshots == ["t0000.sdt", "t0001.sdt", "t0002.sdt", "t0003.sdt"]
    assert (run_dir / "admm-bp" / "signal" / "admm_residuals.csv").is_file()
    assert (run_dir / "dip" / "signal" / "trace.csv").is_file()
    assert all(isinstance(r, MethodSucceeded) for r in outcome.results)


def test_metrics_are_reproducible(tmp_path: Path) -> None:
    cfg = resolve(tiny_cs_config())
    first = run_experiment(cfg, out=tmp_path / "a", workers=1)
    second = run_experiment(cfg, out=tmp_path / "b", workers=1)
    assert first.run_dir is not None and second.run_dir is not None
    assert (first.run_dir / "metrics.csv").read_bytes() == (second.run_dir / "metrics.csv").read_bytes()
    assert (first.run_dir / "sdi" / "signal" / "trace.csv").read_bytes() == (
        second.run_dir / "sdi" / "signal" / "trace.csv"
    ).read_bytes()


def test_a_failing_method_does_not_stop_the_others(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    def abort(*args: Any, **kwargs: Any) -> Any:
        raise SolveAborted("dip", 3, "non-finite loss")

    monkeypatch.setattr(runner, "dip_solve", abort)
    outcome = run_experiment(resolve(tiny_cs_config()), out=tmp_path, workers=1)
    assert outcome.exit_code == 1
    assert outcome.run_dir is not None
    failed = [r for r in outcome.results if isinstance(r, MethodFailed)]
    assert len(failed) == 1
    assert failed[0].method == "dip" and failed[0].step == 3
    lines = (outcome.run_dir / "metrics.csv").read_text().splitlines()
    assert lines[2] == "signal,dip,failed,,"
    assert lines[1].startswith("signal,sdi,ok,")


def test_dry_run_writes_nothing(tmp_path: Path) -> None:
    outcome = run_experiment(resolve(tiny_cs_config()), out=tmp_path, dry_run=True)
    assert outcome.exit_code == 0
    assert outcome.run_dir is None
    assert list(tmp_path.iterdir()) == []


def test_sweep_table(tmp_path: Path) -> None:
    cfg = resolve(
        tiny_cs_config(
            methods=["sdi"],
            diagnostics=False,
            sweep={"T_values": [1, 2], "K_values": [2, 3]},
        )
    )
    outcome = run_sweep(cfg, out=tmp_path, workers=1)
    assert outcome.exit_code == 0
    assert outcome.run_dir is not None
    table = (outcome.run_dir / "sensitivity.csv").read_text().splitlines()
    assert table[0] == "T,K2,K3"
    assert [row.split(",")[0] for row in table[1:]] == ["1", "2"]
    assert all(value != "" for row in table[1:] for value in row.split(","))
    assert (outcome.run_dir / "T2-K3" / "sdi" / "signal" / "trace.csv").is_file()
    with pytest.raises(ValueError):
        run_sweep(resolve(tiny_cs_config()), out=tmp_path)


if __name__ == "__main__":
    test_run_writes_the_run_directory(Path("/tmp"))
