import numpy as np
import pytest

from atlasreg import (
    BSplineTransform,
    DegenerateInputError,
    InvalidInputError,
    JointHistogram,
    ObjectiveWeights,
    PhantomSpec,
    Volume,
    bending_energy,
    build_joint_histogram,
    generate_phantom,
    inconsistency_penalty,
    nmi,
    objective,
    random_smooth_deformation,
)
from atlasreg.objective import (
    bending_energy_gradient,
    inconsistency_gradient,
    robust_range,
    similarity_and_gradient,
    _roundtrip_residual,
)
from atlasreg.transforms import bspline_kernel, dense_displacement


def _noise_volume(seed, dims=(8, 8, 8), lo=0.0, hi=100.0):
    rng = np.random.default_rng(seed)
    return Volume(rng.uniform(lo, hi, dims).astype(np.float32))


def _gradient_phantom(seed):
    spec = PhantomSpec(dims=(16, 16, 16), lv_radius=1.6, myo_thickness=1.2,
                       rv_offset=(2.2, 0.8, 0.0), rv_radius=1.2,
                       noise_sigma=1.5, seed=seed)
    return generate_phantom(spec)[0]


# --- joint histogram -----------------------------------------------------

def test_total_mass_equals_contributing_voxels():
    ref = _noise_volume(0)
    wrp = _noise_volume(1)
    h = build_joint_histogram(ref, wrp)
    assert h.total == pytest.approx(ref.data.size, rel=1e-6)

    mask = np.zeros(ref.dims, dtype=bool)
    mask[:4] = True
    h2 = build_joint_histogram(ref, wrp, mask=mask)
    assert h2.total == pytest.approx(int(mask.sum()), rel=1e-6)


def test_identical_images_concentrate_on_diagonal():
    ref = _noise_volume(2)
    h = build_joint_histogram(ref, ref)
    idx_r, idx_f = np.nonzero(h.counts)
    assert np.abs(idx_r - idx_f).max() <= 3  # within the kernel footprint


def test_two_voxel_hand_footprint():
    # one contributing voxel pair with intensities at the range midpoints;
    # expected counts are the outer product of hand-evaluated kernel weights
    ref = Volume(np.array([5.0, 0.0]).reshape(2, 1, 1))
    wrp = Volume(np.array([2.0, 0.0]).reshape(2, 1, 1))
    mask = np.array([True, False]).reshape(2, 1, 1)
    bins = 8
    ranges = ((0.0, 10.0), (0.0, 10.0))
    h = build_joint_histogram(ref, wrp, mask=mask, bins=bins, ranges=ranges)
    # q_ref = 5/10*4+1 = 3.0, q_flt = 2/10*4+1 = 1.8
    w_ref = {b: bspline_kernel(3.0 - b) for b in (2, 3, 4, 5)}
    w_flt = {b: bspline_kernel(1.8 - b) for b in (0, 1, 2, 3)}
    expected = np.zeros((bins, bins))
    for br, wr in w_ref.items():
        for bf, wf in w_flt.items():
            expected[br, bf] = wr * wf
    np.testing.assert_allclose(h.counts, expected, atol=1e-12)


def test_constant_image_is_degenerate():
    const = Volume(np.full((4, 4, 4), 3.0))
    other = _noise_volume(3, (4, 4, 4))
    with pytest.raises(DegenerateInputError):
        build_joint_histogram(const, other)


def test_marginals_sum_to_total():
    ref = _noise_volume(4)
    wrp = _noise_volume(5)
    h = build_joint_histogram(ref, wrp)
    assert h.ref_marginal.sum() == pytest.approx(h.total, rel=1e-9)
    assert h.flt_marginal.sum() == pytest.approx(h.total, rel=1e-9)


# --- NMI -----------------------------------------------------------------

def test_nmi_perfect_diagonal_is_two():
    counts = np.diag(np.array([3.0, 5.0, 2.0, 7.0]))
    h = JointHistogram(4, counts, 17, (0, 1), (0, 1))
    assert nmi(h) == pytest.approx(2.0)


def test_nmi_independent_images_is_one():
    pr = np.array([0.1, 0.4, 0.2, 0.3])
    pf = np.array([0.25, 0.25, 0.3, 0.2])
    h = JointHistogram(4, np.outer(pr, pf) * 100, 100, (0, 1), (0, 1))
    assert nmi(h) == pytest.approx(1.0)


def test_nmi_matches_direct_entropy_oracle():
    counts = np.array([[4.0, 1.0, 0.0],
                       [2.0, 6.0, 1.0],
                       [0.0, 3.0, 5.0]])
    h = JointHistogram(3, counts, 22, (0, 1), (0, 1))

    p = counts / counts.sum()

    def ent(q):
        q = q[q > 0]
        return -(q * np.log(q)).sum()

    expected = (ent(p.sum(1)) + ent(p.sum(0))) / ent(p.reshape(-1))
    assert nmi(h) == pytest.approx(expected, abs=1e-12)


def test_nmi_bounds_and_symmetry():
    rng = np.random.default_rng(6)
    for _ in range(10):
        a = _noise_volume(rng.integers(1000))
        b = _noise_volume(rng.integers(1000))
        v = nmi(build_joint_histogram(a, b))
        assert 1.0 - 1e-9 <= v <= 2.0 + 1e-9
        v_swapped = nmi(build_joint_histogram(b, a))
        assert v == pytest.approx(v_swapped, abs=1e-12)


def test_nmi_invariant_under_positive_rescaling():
    a = _noise_volume(7)
    b = _noise_volume(8)
    ra = robust_range(a.data.reshape(-1))
    rb = robust_range(b.data.reshape(-1))
    h1 = build_joint_histogram(a, b, ranges=(ra, rb))
    c = 4.0  # power of two: exact in float32, so bin assignment is preserved
    a2 = Volume(a.data * c)
    h2 = build_joint_histogram(a2, b, ranges=((ra[0] * c, ra[1] * c), rb))
    np.testing.assert_allclose(h1.counts, h2.counts, atol=1e-9)
    assert nmi(h1) == pytest.approx(nmi(h2), abs=1e-12)


def test_zero_mass_histogram_is_degenerate():
    h = JointHistogram(4, np.zeros((4, 4)), 0, (0, 1), (0, 1))
    with pytest.raises(DegenerateInputError):
        nmi(h)


# --- bending energy ------------------------------------------------------

def _transform(dims=(12, 12, 12), spacing=4.0):
    return BSplineTransform.zeros(Volume(np.zeros(dims, dtype=np.float32)), spacing)


def test_bending_zero_for_identity_and_constant():
    t = _transform()
    assert bending_energy(t) == 0.0
    const = t.with_coefficients(np.broadcast_to((2.0, -1.0, 3.0), t.coefficients.shape))
    assert bending_energy(const) == pytest.approx(0.0, abs=1e-12)


def test_bending_zero_for_linear_ramp():
    t = _transform()
    g = np.stack(np.meshgrid(*(np.arange(d, dtype=float) for d in t.grid_dims),
                             indexing="ij"), axis=-1)
    ramp = g @ np.array([[0.3, 0.1, 0.0], [-0.2, 0.4, 0.2], [0.0, 0.1, -0.3]])
    assert bending_energy(t.with_coefficients(ramp)) == pytest.approx(0.0, abs=1e-8)


def test_bending_positive_and_matches_dense_fd_oracle():
    # small-step central differences of the continuous field at every voxel
    rng = np.random.default_rng(9)
    t = _transform((16, 16, 16), 4.0)
    t = t.with_coefficients(rng.normal(0, 1.0, t.coefficients.shape))
    e = bending_energy(t)
    assert e > 0

    from atlasreg import deform

    nx, ny, nz = t.reference_dims
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    x = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(float)
    h = 1e-3
    e1, e2, e3 = np.eye(3) * h

    def d2(a):
        return (deform(t, x + a) - 2 * deform(t, x) + deform(t, x - a)) / h ** 2

    def d2m(a, b):
        return (deform(t, x + a + b) - deform(t, x + a - b)
                - deform(t, x - a + b) + deform(t, x - a - b)) / (4 * h ** 2)

    fd_energy = ((d2(e1) ** 2 + d2(e2) ** 2 + d2(e3) ** 2
                  + 2 * (d2m(e1, e2) ** 2 + d2m(e2, e3) ** 2 + d2m(e1, e3) ** 2))
                 .sum(axis=-1).mean())
    assert e == pytest.approx(fd_energy, rel=1e-4)


def test_bending_gradient_matches_finite_differences():
    rng = np.random.default_rng(10)
    t = _transform()
    t = t.with_coefficients(rng.normal(0, 0.8, t.coefficients.shape))
    e, g = bending_energy_gradient(t)
    assert e == pytest.approx(bending_energy(t), abs=1e-12)
    h = 1e-4
    for _ in range(15):
        ix = tuple(rng.integers(0, d) for d in t.grid_dims) + (rng.integers(3),)
        cp = t.coefficients.copy()
        cm = t.coefficients.copy()
        cp[ix] += h
        cm[ix] -= h
        fd = (bending_energy(t.with_coefficients(cp))
              - bending_energy(t.with_coefficients(cm))) / (2 * h)
        assert g[ix] == pytest.approx(fd, rel=1e-2, abs=1e-10)


# --- inconsistency penalty -----------------------------------------------

def test_inconsistency_trivial_cases():
    fwd = _transform()
    bwd = _transform()
    assert inconsistency_penalty(fwd, bwd) == 0.0

    d = np.array([1.0, 2.0, -1.5])
    fwd_c = fwd.with_coefficients(np.broadcast_to(d, fwd.coefficients.shape))
    bwd_c = bwd.with_coefficients(np.broadcast_to(-d, bwd.coefficients.shape))
    assert inconsistency_penalty(fwd_c, bwd_c) == pytest.approx(0.0, abs=1e-18)

    # fwd constant +d, bwd zero: both round trips leave residual d
    val = inconsistency_penalty(fwd_c, bwd)
    assert val == pytest.approx(2.0 * float(d @ d), rel=1e-12)


def test_inconsistency_symmetry_and_nonnegativity():
    rng = np.random.default_rng(11)
    fwd = _transform().with_coefficients(rng.normal(0, 1, _transform().coefficients.shape))
    bwd = _transform().with_coefficients(rng.normal(0, 1, _transform().coefficients.shape))
    v1 = inconsistency_penalty(fwd, bwd)
    v2 = inconsistency_penalty(bwd, fwd)
    assert v1 >= 0
    assert v1 == pytest.approx(v2, rel=1e-12)


def test_inconsistency_gradient_matches_per_term_fd():
    # each round-trip term drives only its outer transform (inner frozen),
    # so the oracle differentiates that term alone
    rng = np.random.default_rng(12)
    base = _transform()
    fwd = base.with_coefficients(rng.normal(0, 0.8, base.coefficients.shape))
    bwd = base.with_coefficients(rng.normal(0, 0.8, base.coefficients.shape))
    val, g_f, g_b = inconsistency_gradient(fwd, bwd)
    n_vox = float(np.prod(fwd.reference_dims))

    def term(outer, inner):
        m, _ = _roundtrip_residual(outer, inner)
        return float((m ** 2).sum()) / n_vox

    assert val == pytest.approx(term(fwd, bwd) + term(bwd, fwd), rel=1e-12)
    h = 1e-4
    for _ in range(12):
        ix = tuple(rng.integers(0, d) for d in fwd.grid_dims) + (rng.integers(3),)
        cp = fwd.coefficients.copy()
        cm = fwd.coefficients.copy()
        cp[ix] += h
        cm[ix] -= h
        fd = (term(fwd.with_coefficients(cp), bwd)
              - term(fwd.with_coefficients(cm), bwd)) / (2 * h)
        assert g_f[ix] == pytest.approx(fd, rel=1e-2, abs=1e-9)


# --- NMI similarity gradient ----------------------------------------------

def test_similarity_gradient_matches_finite_differences():
    ref = _gradient_phantom(3)
    flt = _gradient_phantom(4)
    base = random_smooth_deformation(ref, 1.5, 5.0, seed=2)
    ranges = (robust_range(ref.data.reshape(-1)), robust_range(flt.data.reshape(-1)))
    s, g = similarity_and_gradient(ref, flt, base, ranges=ranges)
    assert 1.0 <= s <= 2.0

    def value(coef):
        return similarity_and_gradient(ref, flt, base.with_coefficients(coef),
                                       ranges=ranges, with_gradient=False)[0]

    rng = np.random.default_rng(13)
    h = 1e-3
    errs = []
    for _ in range(40):
        ix = tuple(rng.integers(0, d) for d in base.grid_dims) + (rng.integers(3),)
        cp = base.coefficients.copy()
        cm = base.coefficients.copy()
        cp[ix] += h
        cm[ix] -= h
        fd = (value(cp) - value(cm)) / (2 * h)
        errs.append(abs(g[ix] - fd) / max(abs(fd), abs(g[ix]), 1e-10))
    assert np.median(errs) < 1e-4
    assert np.mean(np.asarray(errs) <= 5e-2) >= 0.99


# --- combined objective ----------------------------------------------------

def test_weights_validation():
    ObjectiveWeights(0.0, 0.0)
    with pytest.raises(InvalidInputError):
        ObjectiveWeights(-0.1, 0.0)
    with pytest.raises(InvalidInputError):
        ObjectiveWeights(0.6, 0.5)


def test_objective_weight_algebra_alpha_beta_zero():
    ref = _gradient_phantom(5)
    flt = _gradient_phantom(6)
    fwd = BSplineTransform.zeros(ref, 5.0)
    bwd = BSplineTransform.zeros(flt, 5.0)
    res = objective(ref, flt, fwd, bwd, ObjectiveWeights(0.0, 0.0))
    assert res.value == pytest.approx(res.similarity_fwd + res.similarity_bwd)
    assert res.bending_fwd == 0.0 and res.inconsistency == 0.0


def test_objective_identical_images_zero_transforms():
    ref = _gradient_phantom(7)
    fwd = BSplineTransform.zeros(ref, 5.0)
    bwd = BSplineTransform.zeros(ref, 5.0)
    w = ObjectiveWeights(0.001, 0.001)
    res = objective(ref, ref, fwd, bwd, w)
    assert res.similarity_fwd == pytest.approx(res.similarity_bwd, abs=1e-12)
    assert res.value == pytest.approx(w.similarity * 2.0 * res.similarity_fwd, abs=1e-12)
    assert res.bending_fwd == 0.0 and res.inconsistency == 0.0
    assert np.all(np.isfinite(res.grad_fwd)) and np.all(np.isfinite(res.grad_bwd))


def test_objective_value_matches_components():
    rng = np.random.default_rng(14)
    ref = _gradient_phantom(8)
    flt = _gradient_phantom(9)
    fwd = BSplineTransform.zeros(ref, 5.0)
    fwd = fwd.with_coefficients(rng.normal(0, 0.5, fwd.coefficients.shape))
    bwd = BSplineTransform.zeros(flt, 5.0)
    bwd = bwd.with_coefficients(rng.normal(0, 0.5, bwd.coefficients.shape))
    w = ObjectiveWeights(0.01, 0.02)
    res = objective(ref, flt, fwd, bwd, w, with_gradient=False)
    expected = (w.similarity * (res.similarity_fwd + res.similarity_bwd)
                - w.alpha * (res.bending_fwd + res.bending_bwd)
                - w.beta * res.inconsistency)
    assert res.value == pytest.approx(expected, abs=1e-12)
    assert res.bending_fwd == pytest.approx(bending_energy(fwd), rel=1e-12)
    assert res.inconsistency == pytest.approx(inconsistency_penalty(fwd, bwd), rel=1e-12)
