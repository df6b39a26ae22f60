import pytest

import numpy as np

from self_diffusion import operators
from self_diffusion.denoiser import build_unet
from self_diffusion.diagnostics import (
    drift_alignment,
    fourier_penalty_profile,
    jacobian_frobenius,
    median_alignment,
    relative_change,
    spectral_trace,
    taylor_check,
)
from self_diffusion.metrics import MetricError

from tests.util import SEED, Array, tiny_denoiser

N = 16
T = 10


@pytest.fixture
def tone() -> Array:
    return np.sin(2 * np.pi * 2 * np.arange(N) / N)


def test_relative_change_reexport() -> None:
    assert relative_change(np.array([2.0]), np.array([1.0])) == pytest.approx(0.25)


def test_spectral_convergence_steps(tone: Array) -> None:
    # The estimate equals the truth from step 4 downwards and is zero before.
    snapshots = {t: (tone if t <= 4 else np.zeros(N)) for t in range(T + 1)}
    trace = spectral_trace(snapshots, tone, T)
    assert trace.steps == list(range(T - 1, -1, -1))
    assert trace.convergence_steps[2] == 4
    assert trace.convergence_steps[N - 2] == 4
    assert trace.mean_convergence_step([2, N - 2]) == pytest.approx(4.0)
    assert trace.to_csv().splitlines()[0].startswith("t,k0,k1")
    assert len(trace.convergence_csv().splitlines()) == N + 1


def test_unsettled_bins_count_as_minus_one(tone: Array) -> None:
    snapshots = {t: np.zeros(N) for t in range(T + 1)}
    trace = spectral_trace(snapshots, tone, T)
    assert trace.convergence_steps[2] is None
    assert trace.mean_convergence_step([2, N - 2]) == pytest.approx(-1.0)


def test_spectral_trace_needs_every_step(tone: Array) -> None:
    with pytest.raises(MetricError):
        spectral_trace({0: tone, 1: tone}, tone, T)


def test_jacobian_of_a_linear_denoiser() -> None:
    rng = np.random.default_rng(SEED)
    M = rng.standard_normal((N, N))
    op = operators.gaussian_cs(8, N, SEED)
    estimate = jacobian_frobenius(op, lambda x: M @ x, np.zeros(N), n_probes=256, seed=1)
    exact = float(np.linalg.norm(op.matrix @ M) ** 2)
    assert abs(estimate.mean - exact) < 5 * estimate.std_error
    assert estimate.n_probes == 256
    with pytest.raises(AssertionError):
        jacobian_frobenius(op, lambda x: M @ x, np.zeros(N), n_probes=4)


def test_taylor_expansion_agrees_for_small_sigma() -> None:
    net = build_unet(tiny_denoiser(), (N,))
    op = operators.gaussian_cs(8, N, SEED)
    rng = np.random.default_rng(SEED)
    x0 = rng.standard_normal(net.input_shape)
    y = rng.standard_normal(8) * 0.1
    result = taylor_check(op, net.evaluate, y, x0, sigma=1e-3, n_mc=64, seed=3)
    assert result.agrees(0.1)
    assert result.predicted_loss == pytest.approx(result.fidelity_term + result.jacobian_term)
    assert result.jacobian_term >= 0


@pytest.mark.parametrize("sigma", [0.1, 1.0, 10.0])
def test_taylor_expansion_is_exact_for_a_linear_denoiser(sigma: float) -> None:
    rng = np.random.default_rng(SEED)
    M = rng.standard_normal((N, N)) / np.sqrt(N)
    op = operators.gaussian_cs(8, N, SEED)
    x0 = rng.standard_normal(N)
    y = rng.standard_normal(8) * 0.1
    result = taylor_check(op, lambda x: M @ x, y, x0, sigma=sigma, n_mc=256, seed=5)
    assert abs(result.mc_expected_loss - result.predicted_loss) < 3 * result.mc_std_error
    exact = float(np.linalg.norm(op.matrix @ M) ** 2)
    assert result.jacobian_term / sigma**2 == pytest.approx(exact, rel=0.3)


def test_hutchinson_counts_the_sampled_entries() -> None:
    k = 10
    mask = np.zeros(32)
    mask[:k] = 1.0
    op = operators.inpaint_mask(mask)
    estimate = jacobian_frobenius(op, lambda x: x, np.zeros(32), n_probes=512, seed=2)
    assert abs(estimate.mean - k) < 4 * estimate.std_error
    # Each sample is a chi-square with k degrees of freedom.
    assert all(s >= 0 for s in estimate.samples)


def test_hutchinson_error_shrinks_with_more_samples() -> None:
    mask = np.zeros(32)
    mask[:10] = 1.0
    op = operators.inpaint_mask(mask)
    errors = [
        jacobian_frobenius(op, lambda x: x, np.zeros(32), n_probes=n, seed=2).std_error
        for n in (8, 64, 512)
    ]
    assert errors[1] > errors[2]
    assert errors[0] > 2 * errors[2]
    # Standard error of a chi-square(10) mean: sqrt(20 / n).
    assert errors[2] == pytest.approx(np.sqrt(20 / 512), rel=0.25)


def test_drift_toward_the_truth(tone: Array) -> None:
    # Straight-line path from zero to the truth.
    snapshots = {t: tone * (1 - t / T) for t in range(T + 1)}
    records = drift_alignment(snapshots, tone)
    assert [r.t for r in records] == list(range(T - 1, -1, -1))
    assert all(r.cosine == pytest.approx(1.0) for r in records)
    assert median_alignment(records) == pytest.approx(1.0)


def test_drift_is_absent_for_a_stalled_step(tone: Array) -> None:
    snapshots = {2: np.zeros(N), 1: np.zeros(N), 0: tone}
    records = drift_alignment(snapshots, tone)
    assert records[0].t == 1 and records[0].cosine is None
    assert records[1].cosine == pytest.approx(1.0)
    assert median_alignment([records[0]]) is None


def test_penalty_profile_of_identity() -> None:
    profile = fourier_penalty_profile(operators.identity((8,)))
    assert np.allclose(profile, [0, 1, 4, 9, 16, 9, 4, 1])


def test_penalty_profile_of_complex_operator() -> None:
    op = operators.masked_fourier(np.ones((4, 4)))
    profile = fourier_penalty_profile(op, complex_pair=True)
    assert profile.shape == (4, 4)
    assert profile[0, 0] == pytest.approx(0.0)
    assert profile[0, 1] == pytest.approx(1.0)
    assert profile[2, 2] == pytest.approx(8.0)


if __name__ == "__main__":
    test_jacobian_of_a_linear_denoiser()
