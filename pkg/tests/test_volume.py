import numpy as np
import pytest

from atlasreg import (
    InvalidInputError,
    LabelVolume,
    ProbabilityVolume,
    Volume,
    resample,
    sample_trilinear,
)


def test_constant_volume_interpolates_to_constant():
    vol = Volume(np.full((4, 4, 4), 7.0))
    assert sample_trilinear(vol, (0.3, 0.7, 0.5)) == pytest.approx(7.0)


def test_exact_at_voxel_centers():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(5, 4, 3)).astype(np.float32)
    vol = Volume(data)
    for idx in ((0, 0, 0), (4, 3, 2), (2, 1, 1)):
        assert sample_trilinear(vol, idx) == pytest.approx(float(data[idx]), abs=1e-6)


def test_hand_computed_linear_blend():
    vol = Volume(np.array([0.0, 10.0]).reshape(2, 1, 1))
    assert sample_trilinear(vol, (0.25, 0.0, 0.0)) == pytest.approx(2.5)


def test_out_of_bounds_returns_padding_value():
    vol = Volume(np.full((3, 3, 3), 5.0))
    assert sample_trilinear(vol, (-0.01, 1, 1)) == 0.0
    assert sample_trilinear(vol, (1, 1, 2.01), out_of_bounds=-1.0) == -1.0


def test_interpolation_bounded_by_neighbors():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(6, 6, 6)).astype(np.float32)
    vol = Volume(data)
    pts = rng.uniform(0, 5, size=(200, 3))
    vals = sample_trilinear(vol, pts)
    for p, v in zip(pts, vals):
        i, j, k = np.floor(p).astype(int)
        i, j, k = min(i, 4), min(j, 4), min(k, 4)
        cube = data[i:i + 2, j:j + 2, k:k + 2]
        assert cube.min() - 1e-6 <= v <= cube.max() + 1e-6


def test_volume_rejects_nan_and_bad_geometry():
    with pytest.raises(InvalidInputError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(InvalidInputError):
        Volume(np.zeros((2, 2, 2)), spacing=(0.0, 1.0, 1.0))
    with pytest.raises(InvalidInputError):
        Volume(np.zeros((2, 2, 2)), direction=np.eye(3) * 2.0)


def test_label_volume_rejects_undeclared_classes():
    with pytest.raises(InvalidInputError):
        LabelVolume(np.full((2, 2, 2), 7))


def test_probability_volume_channel_sum():
    ch = np.zeros((2, 2, 2, 2), dtype=np.float32)
    ch[0] = 0.25
    ch[1] = 0.75
    ProbabilityVolume(ch)
    ch2 = ch.copy()
    ch2[0] += 0.01
    with pytest.raises(InvalidInputError):
        ProbabilityVolume(ch2)


def test_world_voxel_round_trip():
    rng = np.random.default_rng(3)
    direction = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    vol = Volume(np.zeros((4, 5, 6), dtype=np.float32), spacing=(1.5, 2.0, 0.5),
                 origin=np.array([10.0, -4.0, 2.0]), direction=direction)
    pts = rng.uniform(0, 3, size=(50, 3))
    back = vol.voxel_from_world(vol.world_from_voxel(pts))
    np.testing.assert_allclose(back, pts, atol=1e-9)


# --- resampling ---------------------------------------------------------

def test_resample_dims_follow_ceil_rule():
    vol = Volume(np.zeros((10, 10, 10), dtype=np.float32), spacing=(2.0, 2.0, 2.0))
    out = resample(vol, (1.0, 1.0, 1.0))
    assert out.dims == (20, 20, 20)
    assert out.spacing == (1.0, 1.0, 1.0)


def test_resample_identity_spacing_is_identity():
    rng = np.random.default_rng(4)
    vol = Volume(rng.normal(size=(6, 5, 4)).astype(np.float32), spacing=(1.25, 1.0, 2.0))
    out = resample(vol, vol.spacing)
    np.testing.assert_array_equal(out.data, vol.data)


def test_resample_matches_trilinear_oracle():
    # 4x4x4 checkerboard at 1 mm resampled to 2 mm, checked voxel by voxel
    i, j, k = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    data = ((i + j + k) % 2).astype(np.float32) * 10.0
    vol = Volume(data, spacing=(1.0, 1.0, 1.0))
    out = resample(vol, (2.0, 2.0, 2.0))
    assert out.dims == (2, 2, 2)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                expected = sample_trilinear(vol, (2.0 * a, 2.0 * b, 2.0 * c))
                assert out.data[a, b, c] == pytest.approx(expected, abs=1e-6)


def test_label_resample_never_invents_classes():
    rng = np.random.default_rng(5)
    data = rng.choice([0, 2], size=(7, 7, 7))
    lbl = LabelVolume(data, spacing=(1.0, 1.0, 1.0))
    out = resample(lbl, (0.6, 1.7, 0.9))
    assert set(np.unique(out.data)) <= set(np.unique(data))


def test_resample_rejects_bad_spacing():
    vol = Volume(np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(InvalidInputError):
        resample(vol, (0.0, 1.0, 1.0))
