import numpy as np
import pytest

from mkrecon import difftensor as dt
from mkrecon.kernels import KernelBank, describe_bank, load_bank, normalize_bank

# The fixed matrices, restated here independently so the bank is checked
# entry-for-entry against a second transcription.

EXPECTED_2D = {
    "sobel_x": [[1, 2, 1], [0, 0, 0], [-1, -2, -1]],
    "sobel_y": [[1, 0, -1], [2, 0, -2], [1, 0, -1]],
    "diag1": [[0, 1, 2], [-1, 0, 1], [-2, -1, 0]],
    "diag2": [[2, 1, 0], [1, 0, -1], [0, -1, -2]],
    "laplacian": [[0, 1, 0], [1, -4, 1], [0, 1, 0]],
    "checkerboard": [[1, -1, 1], [-1, 1, -1], [1, -1, 1]],
}
ORDER_2D = ["sobel_x", "sobel_y", "diag1", "diag2", "laplacian", "checkerboard"]
RAW_WEIGHTS_2D = [0.1, 0.1, 0.5, 0.5, 2.0, 0.05]

_CHK = [[1, -1, 1], [-1, 1, -1], [1, -1, 1]]
EXPECTED_3D = {
    "sobel_x": [[[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]] * 3,
    "sobel_y": [[[1, 2, 1], [0, 0, 0], [-1, -2, -1]]] * 3,
    "sobel_z": [[[1] * 3] * 3, [[0] * 3] * 3, [[-1] * 3] * 3],
    "laplacian": [
        [[0, 1, 0], [1, -6, 1], [0, 1, 0]],
        [[1, -6, 1], [-6, 24, -6], [1, -6, 1]],
        [[0, 1, 0], [1, -6, 1], [0, 1, 0]],
    ],
    "diag1": [[[0, 1, 2], [-1, 0, 1], [-2, -1, 0]]] * 3,
    "diag2": [[[2, 1, 0], [1, 0, -1], [0, -1, -2]]] * 3,
    "gaussian": [
        [[1, 2, 1], [2, 4, 2], [1, 2, 1]],
        [[2, 4, 2], [4, 8, 4], [2, 4, 2]],
        [[1, 2, 1], [2, 4, 2], [1, 2, 1]],
    ],
    "highpass": [[[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]]] * 3,
    "log": [
        [[0, 0, -1], [0, -1, -2], [-1, -2, -1]],
        [[0, -1, -2], [-1, 16, -2], [-2, -1, 0]],
        [[-1, -2, -1], [-2, -1, 0], [0, 0, 0]],
    ],
    "cross_diag": [[[1, 0, -1], [0, 0, 0], [-1, 0, 1]]] * 3,
    "checkerboard": [_CHK, [[-1, 1, -1], [1, -1, 1], [-1, 1, -1]], _CHK],
}
ORDER_3D = ["sobel_x", "sobel_y", "sobel_z", "laplacian", "diag1", "diag2",
            "gaussian", "highpass", "log", "cross_diag", "checkerboard"]
RAW_WEIGHTS_3D = [1, 1, 1, 2, 0.8, 0.8, 0.5, 1.2, 1.5, 0.8, 0.5]

ZERO_SUM_2D = ["sobel_x", "sobel_y", "diag1", "diag2", "laplacian"]


def test_2d_bank_matches_fixed_matrices_entry_for_entry():
    bank = load_bank(2)
    assert list(bank.names) == ORDER_2D
    for name, raw in zip(bank.names, bank.raw_kernels):
        assert np.array_equal(raw, np.array(EXPECTED_2D[name], dtype=float)), name
    assert list(bank.raw_weights) == RAW_WEIGHTS_2D


def test_3d_bank_matches_fixed_matrices_entry_for_entry():
    bank = load_bank(3)
    assert list(bank.names) == ORDER_3D
    for name, raw in zip(bank.names, bank.raw_kernels):
        assert np.array_equal(raw, np.array(EXPECTED_3D[name], dtype=float)), name
    assert [float(w) for w in bank.raw_weights] == RAW_WEIGHTS_3D


def test_2d_sobel_x_center_row_is_zero():
    bank = load_bank(2)
    assert np.array_equal(bank.raw_kernels[0][1], [0.0, 0.0, 0.0])


def test_3d_laplacian_center_is_24_before_normalization():
    bank = load_bank(3)
    assert bank.raw_kernels[3][1, 1, 1] == 24.0


def test_normalized_kernels_have_unit_abs_sum():
    for dims in (2, 3):
        for name, kern, _ in load_bank(dims):
            assert abs(np.abs(kern).sum() - 1.0) < 1e-9, (dims, name)


def test_normalized_sobel_entries():
    # 2D sobel abs-sum is 8, so the centre-adjacent entry 2 becomes 2/8
    bank = load_bank(2)
    assert abs(bank.kernels[0][0, 1] - 0.25) < 1e-15


def test_weight_normalization_values():
    b2 = load_bank(2)
    assert abs(sum(b2.raw_weights) - 3.25) < 1e-15
    assert abs(b2.weights[4] - 2.0 / 3.25) < 1e-15      # laplacian
    assert abs(sum(b2.weights) - 1.0) < 1e-12
    b3 = load_bank(3)
    assert abs(sum(b3.raw_weights) - 11.1) < 1e-12
    assert abs(b3.weights[3] - 2.0 / 11.1) < 1e-15      # laplacian
    assert abs(sum(b3.weights) - 1.0) < 1e-12
    assert all(w >= 0 for w in b2.weights + b3.weights)


def test_zero_sum_kernels_kill_constants():
    const2 = np.full((6, 6), 5.0)
    bank = load_bank(2)
    for name, kern, _ in bank:
        if name in ZERO_SUM_2D:
            out = dt.conv(const2, kern, padding="valid").data
            assert np.abs(out).max() < 1e-12, name
    const3 = np.full((5, 5, 5), 5.0)
    for name, kern, _ in load_bank(3):
        if name in ("sobel_x", "sobel_y", "sobel_z", "diag1", "diag2",
                    "cross_diag"):
            out = dt.conv(const3, kern, padding="valid").data
            assert np.abs(out).max() < 1e-12, name


def test_2d_laplacian_zero_on_affine_images():
    i, j = np.meshgrid(np.arange(10.0), np.arange(12.0), indexing="ij")
    img = 0.3 * i - 1.7 * j + 4.0
    lap = load_bank(2).kernels[4]
    out = dt.conv(img, lap, padding="valid").data
    assert np.abs(out).max() < 1e-12


def test_bank_construction_deterministic():
    for dims in (2, 3):
        a, b = load_bank(dims), load_bank(dims)
        for ka, kb in zip(a.kernels, b.kernels):
            assert np.array_equal(ka, kb)
        assert a.weights == b.weights


def test_all_zero_kernel_rejected():
    bank = load_bank(2)
    broken = KernelBank(
        dims=2, names=("zero",),
        raw_kernels=(np.zeros((3, 3)),), kernels=(np.zeros((3, 3)),),
        raw_weights=(1.0,), weights=(1.0,), epsilon=bank.epsilon)
    with pytest.raises(ValueError, match="all zero"):
        normalize_bank(broken)


def test_bad_dims_rejected():
    with pytest.raises(ValueError, match="dims"):
        load_bank(4)


def test_epsilon_field():
    assert load_bank(2).epsilon == 1e-6
    assert load_bank(3).epsilon == 1e-6


def test_describe_bank_lists_everything():
    text = describe_bank(load_bank(3))
    for name in ORDER_3D:
        assert name in text
    assert "raw_weight=2" in text
