import numpy as np
import pytest

from atlasreg import (
    GeometryMismatchError,
    LabelVolume,
    ProbabilityVolume,
    UndefinedMetricError,
    dice,
    evaluate,
    jaccard,
    soft_dice_loss,
    surface_distances,
)


def _lbl(data, spacing=(1.0, 1.0, 1.0)):
    return LabelVolume(np.asarray(data), spacing)


def _random_pair(rng, dims=(6, 6, 6)):
    return (_lbl(rng.integers(0, 4, dims)), _lbl(rng.integers(0, 4, dims)))


# --- overlap oracles -----------------------------------------------------

def brute_dice(pred, gt, cls):
    p = pred.data == cls
    g = gt.data == cls
    inter = sum(1 for idx in np.ndindex(pred.dims) if p[idx] and g[idx])
    np_, ng = p.sum(), g.sum()
    if np_ + ng == 0:
        return 1.0
    return 2.0 * inter / (np_ + ng)


def brute_surface(mask):
    pts = []
    nx, ny, nz = mask.shape
    for i, j, k in np.argwhere(mask):
        for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                           (0, 0, 1), (0, 0, -1)):
            ni, nj, nk = i + di, j + dj, k + dk
            outside = not (0 <= ni < nx and 0 <= nj < ny and 0 <= nk < nz)
            if outside or not mask[ni, nj, nk]:
                pts.append((i, j, k))
                break
    return np.array(pts, dtype=float)


def brute_distances(pred, gt, cls, spacing):
    ps = brute_surface(pred.data == cls) * np.asarray(spacing)
    gs = brute_surface(gt.data == cls) * np.asarray(spacing)
    d_pg = [min(np.linalg.norm(p - g) for g in gs) for p in ps]
    d_gp = [min(np.linalg.norm(g - p) for p in ps) for g in gs]
    asd = (np.mean(d_pg) + np.mean(d_gp)) / 2.0
    return asd, max(max(d_pg), max(d_gp))


def test_dice_perfect_disjoint_half():
    full = _lbl(np.full((2, 2, 2), 1))
    assert dice(full, full, 1) == 1.0

    a = np.zeros((4, 1, 1), dtype=np.uint8)
    b = np.zeros((4, 1, 1), dtype=np.uint8)
    a[:2] = 1
    b[2:] = 1
    assert dice(_lbl(a), _lbl(b), 1) == 0.0

    # |P| = |G| = 8, intersection 4 -> dice 0.5
    p = np.zeros((4, 2, 2), dtype=np.uint8)
    g = np.zeros((4, 2, 2), dtype=np.uint8)
    p[0:2] = 1  # 8 voxels
    g[1:3] = 1  # 8 voxels, 4 shared
    assert dice(_lbl(p), _lbl(g), 1) == pytest.approx(0.5)


def test_empty_set_conventions():
    empty = _lbl(np.zeros((2, 2, 2), dtype=np.uint8))
    one = _lbl(np.full((2, 2, 2), 1, dtype=np.uint8))
    assert dice(empty, empty, 1) == 1.0
    assert dice(one, empty, 1) == 0.0
    assert jaccard(empty, empty, 1) == 1.0
    assert jaccard(one, empty, 1) == 0.0


def test_jaccard_dice_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pred, gt = _random_pair(rng)
        for cls in (1, 2, 3):
            d = dice(pred, gt, cls)
            j = jaccard(pred, gt, cls)
            assert j == pytest.approx(d / (2.0 - d), abs=1e-12)
            assert j <= d + 1e-12
    # the quoted example: dice 0.5 -> jaccard 1/3
    p = np.zeros((4, 2, 2), dtype=np.uint8)
    g = np.zeros((4, 2, 2), dtype=np.uint8)
    p[0:2] = 1
    g[1:3] = 1
    assert jaccard(_lbl(p), _lbl(g), 1) == pytest.approx(1.0 / 3.0)


def test_overlap_metrics_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pred, gt = _random_pair(rng, dims=(5, 4, 6))
        for cls in (1, 2, 3):
            assert dice(pred, gt, cls) == pytest.approx(brute_dice(pred, gt, cls))


def test_dice_symmetry_and_geometry_error():
    rng = np.random.default_rng(2)
    pred, gt = _random_pair(rng)
    for cls in (1, 2, 3):
        assert dice(pred, gt, cls) == dice(gt, pred, cls)
    other = _lbl(np.zeros((3, 3, 3), dtype=np.uint8))
    with pytest.raises(GeometryMismatchError):
        dice(pred, other, 1)


# --- surface distances ---------------------------------------------------

def test_identical_masks_have_zero_distances():
    rng = np.random.default_rng(3)
    data = np.zeros((6, 6, 6), dtype=np.uint8)
    data[2:5, 1:4, 2:4] = 1
    lbl = _lbl(data)
    asd, hd = surface_distances(lbl, lbl, 1)
    assert asd == 0.0 and hd == 0.0


def test_single_voxel_sets_three_apart():
    a = np.zeros((8, 1, 1), dtype=np.uint8)
    b = np.zeros((8, 1, 1), dtype=np.uint8)
    a[1] = 1
    b[4] = 1
    asd, hd = surface_distances(_lbl(a), _lbl(b), 1)
    assert asd == pytest.approx(3.0)
    assert hd == pytest.approx(3.0)


def test_distances_match_all_pairs_oracle():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(25):
        pred, gt = _random_pair(rng, dims=(5, 5, 5))
        for cls in (1, 2, 3):
            if not ((pred.data == cls).any() and (gt.data == cls).any()):
                continue
            asd, hd = surface_distances(pred, gt, cls)
            basd, bhd = brute_distances(pred, gt, cls, pred.spacing)
            assert asd == pytest.approx(basd, abs=1e-9)
            assert hd == pytest.approx(bhd, abs=1e-9)
            assert hd >= asd >= 0.0
            checked += 1
    assert checked >= 20


def test_distances_use_physical_spacing():
    a = np.zeros((4, 1, 1), dtype=np.uint8)
    b = np.zeros((4, 1, 1), dtype=np.uint8)
    a[0] = 1
    b[2] = 1
    asd, hd = surface_distances(_lbl(a, spacing=(2.5, 1.0, 1.0)),
                                _lbl(b, spacing=(2.5, 1.0, 1.0)), 1)
    assert hd == pytest.approx(5.0)


def test_empty_class_raises_undefined_metric():
    empty = _lbl(np.zeros((3, 3, 3), dtype=np.uint8))
    one = _lbl(np.full((3, 3, 3), 1, dtype=np.uint8))
    with pytest.raises(UndefinedMetricError):
        surface_distances(one, empty, 1)


# --- soft dice -----------------------------------------------------------

def _one_hot(target, classes=4):
    ch = np.stack([(target.data == c) for c in range(classes)]).astype(np.float32)
    return ProbabilityVolume(ch, target.spacing, target.origin, target.direction)


def test_soft_dice_perfect_prediction_is_zero():
    rng = np.random.default_rng(5)
    target = _lbl(rng.integers(0, 4, (4, 4, 4)))
    prob = _one_hot(target)
    for cls in (1, 2, 3):
        assert soft_dice_loss(prob, target, cls) == pytest.approx(0.0, abs=1e-12)


def test_soft_dice_zero_channel_is_one():
    data = np.zeros((4, 1, 1), dtype=np.uint8)
    data[:2] = 1
    target = _lbl(data)
    ch = np.zeros((2, 4, 1, 1), dtype=np.float32)
    ch[0] = 1.0  # all mass on background; channel 1 empty
    prob = ProbabilityVolume(ch)
    assert soft_dice_loss(prob, target, 1) == pytest.approx(1.0)


def test_soft_dice_hand_arithmetic():
    # uniform 0.5 probability on 4 voxels, 2 positives:
    # 1 - 2*(0.5*2) / (4*0.25 + 2) = 1/3
    data = np.zeros((4, 1, 1), dtype=np.uint8)
    data[:2] = 1
    target = _lbl(data)
    ch = np.full((2, 4, 1, 1), 0.5, dtype=np.float32)
    prob = ProbabilityVolume(ch)
    assert soft_dice_loss(prob, target, 1) == pytest.approx(1.0 / 3.0)


def test_soft_dice_one_hot_equals_one_minus_dice():
    rng = np.random.default_rng(6)
    for _ in range(10):
        pred, gt = _random_pair(rng)
        prob = _one_hot(pred)
        for cls in (1, 2, 3):
            assert soft_dice_loss(prob, gt, cls) == pytest.approx(
                1.0 - dice(pred, gt, cls), abs=1e-9)


def test_soft_dice_multiclass_averages_foreground():
    rng = np.random.default_rng(7)
    pred, gt = _random_pair(rng)
    prob = _one_hot(pred)
    per_class = [soft_dice_loss(prob, gt, c) for c in (1, 2, 3)]
    assert soft_dice_loss(prob, gt) == pytest.approx(np.mean(per_class))


# --- full report ---------------------------------------------------------

def test_evaluate_perfect_prediction():
    rng = np.random.default_rng(8)
    gt = _lbl(rng.integers(0, 4, (6, 6, 6)))
    report = evaluate(gt, gt)
    for cls in (1, 2, 3):
        m = report.per_class[cls]
        assert m.dice == 1.0 and m.jaccard == 1.0
        assert m.asd_mm == 0.0 and m.hausdorff_mm == 0.0
    assert report.average("dice") == 1.0


def test_report_averages_match_recomputation():
    rng = np.random.default_rng(9)
    pred, gt = _random_pair(rng, dims=(7, 7, 7))
    report = evaluate(pred, gt)
    for name in ("dice", "jaccard", "asd_mm", "hausdorff_mm"):
        vals = [getattr(report.per_class[c], name) for c in (1, 2, 3)]
        if any(v is None for v in vals):
            assert report.average(name) is None
        else:
            assert report.average(name) == pytest.approx(np.mean(vals), abs=1e-9)


def test_report_matches_independent_recount():
    rng = np.random.default_rng(10)
    pred, gt = _random_pair(rng, dims=(5, 6, 5))
    report = evaluate(pred, gt)
    for cls in (1, 2, 3):
        assert report.per_class[cls].dice == pytest.approx(brute_dice(pred, gt, cls))


def test_report_missing_entries_render_as_na():
    pred = _lbl(np.zeros((3, 3, 3), dtype=np.uint8))
    gt = _lbl(np.full((3, 3, 3), 1, dtype=np.uint8))
    report = evaluate(pred, gt)
    assert report.per_class[1].asd_mm is None
    csv = report.to_csv()
    assert "NA" in csv
    assert csv.splitlines()[0] == "class,dice,jaccard,asd_mm,hd_mm"
    table = report.to_table()
    assert "LV Cavity" in table and "Hausdorff distance [mm]" in table
