import pytest

import numpy as np
from hypothesis import given, settings
import hypothesis.strategies as st

from self_diffusion import operators
from self_diffusion.operators import LinearOperator, OperatorError

from tests.util import ADJOINT_TOL, SEED


def test_adjoint_identity_for_every_operator(all_operators: list[LinearOperator]) -> None:
    for op in all_operators:
        assert operators.adjoint_test(op, seed=SEED) < ADJOINT_TOL, repr(op)


@settings(max_examples=20, deadline=None)
@given(
    m=st.integers(min_value=1, max_value=12),
    extra=st.integers(min_value=0, max_value=12),
    seed=st.integers(min_value=0, max_value=2**32),
)
def test_gaussian_adjoint_property(m: int, extra: int, seed: int) -> None:
    op = operators.gaussian_cs(m, m + extra, seed)
    assert operators.adjoint_test(op, seed=seed, probes=4) < ADJOINT_TOL


def test_gaussian_cs_is_normalized_and_seeded() -> None:
    op = operators.gaussian_cs(35, 128, SEED)
    assert op.matrix.shape == (35, 128)
    assert np.linalg.norm(op.matrix) == pytest.approx(1.0)
    assert np.array_equal(op.matrix, operators.gaussian_cs(35, 128, SEED).matrix)
    assert not np.array_equal(op.matrix, operators.gaussian_cs(35, 128, SEED + 1).matrix)
    with pytest.raises(OperatorError):
        operators.gaussian_cs(10, 5, SEED)


def test_shape_is_checked_on_apply_and_adjoint() -> None:
    op = operators.avgpool(2, (8, 8))
    with pytest.raises(OperatorError):
        op.apply(np.zeros((4, 4)))
    with pytest.raises(OperatorError):
        op.adjoint(np.zeros((8, 8)))


def test_inpaint_mask_rejects_non_binary() -> None:
    with pytest.raises(OperatorError):
        operators.inpaint_mask(np.array([[0.0, 0.5], [1.0, 1.0]]))
    op = operators.inpaint_mask(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.array_equal(op.apply(np.full((2, 2), 3.0)), [[0.0, 3.0], [3.0, 0.0]])


def test_blur_two_tap_kernel_as_odd_kernel() -> None:
    # The two-tap average (0.5, 0.5) zero-extended to odd length.
    op = operators.blur(np.array([0.0, 0.5, 0.5]), (1, 3))
    assert np.allclose(op.apply(np.array([[1.0, 0.0, 0.0]])), [[0.5, 0.5, 0.0]])


def test_blur_kernel_validation() -> None:
    with pytest.raises(OperatorError):
        operators.blur(np.array([0.5, 0.5]), (4, 4))
    with pytest.raises(OperatorError):
        operators.blur(np.ones((3, 3)), (4, 4))


def test_circular_blur_preserves_mass() -> None:
    op = operators.blur(operators.motion_kernel(5.0, 45.0, 7), (12, 12), circular=True)
    x = np.random.default_rng(SEED).random((12, 12))
    assert op.apply(x).sum() == pytest.approx(x.sum())


def test_avgpool_block_means() -> None:
    op = operators.avgpool(2, (2, 4))
    x = np.array([[1.0, 3.0, 0.0, 0.0], [5.0, 7.0, 4.0, 8.0]])
    assert np.array_equal(op.apply(x), [[4.0, 3.0]])
    assert np.array_equal(op.adjoint(np.array([[4.0, 8.0]])), [[1.0, 1.0, 2.0, 2.0]] * 2)
    with pytest.raises(OperatorError):
        operators.avgpool(3, (8, 8))


def test_full_fourier_pattern_is_unitary() -> None:
    op = operators.masked_fourier(np.ones((8, 8)))
    x = np.random.default_rng(SEED).standard_normal((2, 8, 8))
    assert np.linalg.norm(op.apply(x)) == pytest.approx(np.linalg.norm(x))
    assert np.allclose(op.adjoint(op.apply(x)), x)


def test_random_rectangle_mask_coverage() -> None:
    for seed in range(20):
        mask = operators.random_rectangle_mask((64, 64), seed)
        hidden = 1.0 - mask.mean()
        assert 0.08 <= hidden <= 0.28
        assert set(np.unique(mask)) <= {0.0, 1.0}
    assert np.array_equal(
        operators.random_rectangle_mask((32, 32), 3), operators.random_rectangle_mask((32, 32), 3)
    )


def test_kernels_are_normalized() -> None:
    motion = operators.motion_kernel(9.0, 30.0, 15)
    assert motion.shape == (15, 15)
    assert motion.sum() == pytest.approx(1.0)
    assert np.all(motion >= 0)
    horizontal = operators.motion_kernel(3.0, 0.0)
    assert horizontal.shape == (3, 3)
    assert np.allclose(horizontal[[0, 2]], 0.0)
    assert operators.box_kernel(5).sum() == pytest.approx(1.0)


def test_stored_kernels_are_renormalized() -> None:
    peak = operators.motion_kernel(5.0, 45.0, 7)
    peak = peak / peak.max()
    assert operators.normalized_kernel(peak).sum() == pytest.approx(1.0)
    with pytest.raises(OperatorError):
        operators.normalized_kernel(np.zeros((3, 3)))
    with pytest.raises(OperatorError):
        operators.normalized_kernel(-np.ones((3, 3)))


def test_minimum_norm_solution() -> None:
    op = operators.gaussian_cs(10, 24, SEED)
    y = np.random.default_rng(SEED).standard_normal(10)
    x = operators.minimum_norm_solution(op, y)
    assert np.allclose(op.apply(x), y, atol=1e-7)
    assert np.allclose(x, np.linalg.pinv(op.matrix) @ y, atol=1e-6)
    with pytest.raises(OperatorError):
        operators.minimum_norm_solution(op, np.ones(9))


def test_minimum_norm_solution_is_the_adjoint_for_orthonormal_rows() -> None:
    op = operators.masked_fourier(operators.equispaced_pattern((8, 8), 2, 2))
    y = op.apply(np.random.default_rng(SEED).standard_normal((2, 8, 8)))
    assert np.allclose(operators.minimum_norm_solution(op, y), op.adjoint(y), atol=1e-9)


def test_equispaced_pattern_samples_dc_and_every_rth_line() -> None:
    pattern = operators.equispaced_pattern((16, 32), acceleration=4, acs_lines=4)
    columns = pattern[0]
    assert np.all(pattern == columns)
    assert columns[0] == 1.0
    centred = np.fft.fftshift(columns)
    assert np.all(centred[::4] == 1.0)
    assert np.all(centred[14:18] == 1.0)
    assert columns.sum() == 8 + 3


def test_describe_reports_shapes() -> None:
    op = operators.blur(operators.box_kernel(3), (8, 8), circular=True)
    info = op.describe()
    assert info["kind"] == "blur"
    assert info["domain_shape"] == [8, 8]
    assert info["circular"] is True


if __name__ == "__main__":
    test_random_rectangle_mask_coverage()
