"""Registration objective: NMI similarity plus two regularization penalties.

The similarity is normalized mutual information computed from a Parzen-window
joint histogram: each image is affinely mapped to the continuous bin range
[1, bins-3] (robust percentile clamping) and every voxel pair deposits a
cubic-kernel-weighted 4x4 footprint, so the histogram is differentiable in
the transform. The smoothness penalty averages squared second derivatives of
the displacement field (cross terms doubled); the inconsistency penalty
averages the squared residual of composing the forward and backward maps.

All gradients with respect to B-spline coefficients are analytic. The
composition gradient treats the inner field of each round trip as fixed, so
each of the two composition terms drives only its outer transform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, GeometryMismatchError, InvalidInputError
from .transforms import (
    BSplineTransform,
    _interp_field_clamped,
    bspline_kernel,
    bspline_kernel_d1,
    dense_displacement,
    splat_to_coefficients,
    world_grid,
)
from .volume import Volume, _trilinear_impl, require_same_geometry

DEFAULT_BINS = 64
_PAD = 1.0  # histogram deposit offset keeping the 4-bin footprint in range


@dataclass(frozen=True)
class ObjectiveWeights:
    """Penalty weights; the similarity keeps weight 1 - alpha - beta."""

    alpha: float = 0.001  # bending energy
    beta: float = 0.001   # inverse-consistency

    def __post_init__(self):
        if not (0 <= self.alpha < 1 and 0 <= self.beta < 1):
            raise InvalidInputError("alpha and beta must lie in [0, 1)")
        if self.alpha + self.beta >= 1:
            raise InvalidInputError("alpha + beta must be < 1 (similarity weight > 0)")

    @property
    def similarity(self) -> float:
        return 1.0 - self.alpha - self.beta


@dataclass(frozen=True)
class JointHistogram:
    """Parzen-window joint intensity histogram of a reference/warped pair."""

    bins: int
    counts: np.ndarray          # (bins, bins), reference bins along axis 0
    n_contributing: int
    ref_range: tuple[float, float]
    flt_range: tuple[float, float]

    @property
    def ref_marginal(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def flt_marginal(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> float:
        return float(self.counts.sum())


def robust_range(values: np.ndarray) -> tuple[float, float]:
    """0.1-99.9 percentile intensity range; degenerate ranges are rejected."""
    lo, hi = np.percentile(values, (0.1, 99.9))
    if not hi > lo:
        raise DegenerateInputError("image has no intensity range (constant image)")
    return float(lo), float(hi)


def _bin_positions(values, vrange, bins):
    """Continuous bin coordinates in [1, bins-3] plus the unclamped mask."""
    lo, hi = vrange
    if not hi > lo:
        raise DegenerateInputError("empty intensity range")
    interior = (values >= lo) & (values <= hi)
    scale = (bins - 4) / (hi - lo)
    q = (np.clip(values, lo, hi) - lo) * scale + _PAD
    q = np.clip(q, _PAD, bins - 3.0)
    return q, scale, interior


def _footprint_weights(q, kernel):
    """(N, 4) kernel weights of the four bins around each continuous position."""
    f = np.floor(q).astype(np.intp)
    offsets = np.arange(4) - 1.0
    return kernel(q[:, None] - f[:, None] - offsets), f


def _deposit_counts(q_r, q_f, bins):
    w_r, f_r = _footprint_weights(q_r, bspline_kernel)
    w_f, f_f = _footprint_weights(q_f, bspline_kernel)
    counts = np.zeros(bins * bins)
    for dr in range(4):
        idx_r = (f_r - 1 + dr) * bins + f_f - 1
        for df in range(4):
            counts += np.bincount(idx_r + df, weights=w_r[:, dr] * w_f[:, df],
                                  minlength=bins * bins)
    return counts.reshape(bins, bins), (f_r, f_f, w_r)


def build_joint_histogram(ref: Volume, warped: Volume, mask=None,
                          bins: int = DEFAULT_BINS, ranges=None) -> JointHistogram:
    """Fill the Parzen joint histogram of two geometrically identical volumes.

    `mask` (bool array over the grid) excludes padding or irrelevant voxels.
    `ranges` optionally fixes the (ref, float) intensity ranges; by default
    they are the robust percentile ranges of the masked voxels.
    """
    require_same_geometry(ref, warped)
    rv = ref.data.reshape(-1).astype(np.float64)
    fv = warped.data.reshape(-1).astype(np.float64)
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        rv, fv = rv[m], fv[m]
    if rv.size == 0:
        raise DegenerateInputError("no contributing voxels")
    if ranges is None:
        ranges = (robust_range(rv), robust_range(fv))
    q_r, _, _ = _bin_positions(rv, ranges[0], bins)
    q_f, _, _ = _bin_positions(fv, ranges[1], bins)
    counts, _ = _deposit_counts(q_r, q_f, bins)
    return JointHistogram(bins, counts, rv.size, tuple(ranges[0]), tuple(ranges[1]))


def _entropy(p: np.ndarray) -> float:
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def nmi(h: JointHistogram) -> float:
    """Normalized mutual information (H(R) + H(F)) / H(R, F), in [1, 2]."""
    total = h.total
    if total <= 0:
        raise DegenerateInputError("joint histogram has zero mass")
    p = h.counts / total
    h_r = _entropy(p.sum(axis=1))
    h_f = _entropy(p.sum(axis=0))
    h_j = _entropy(p.reshape(-1))
    if h_j <= 0:
        raise DegenerateInputError("joint entropy is zero (constant images)")
    return (h_r + h_f) / h_j


def _nmi_and_count_gradient(counts: np.ndarray):
    """NMI value and its derivative with respect to each histogram count."""
    total = counts.sum()
    if total <= 0:
        raise DegenerateInputError("joint histogram has zero mass")
    p = counts / total
    p_r = p.sum(axis=1)
    p_f = p.sum(axis=0)
    h_r = _entropy(p_r)
    h_f = _entropy(p_f)
    h_j = _entropy(p.reshape(-1))
    if h_j <= 0:
        raise DegenerateInputError("joint entropy is zero (constant images)")
    s = (h_r + h_f) / h_j

    log_r = np.where(p_r > 0, np.log(p_r, where=p_r > 0), 0.0)
    log_f = np.where(p_f > 0, np.log(p_f, where=p_f > 0), 0.0)
    log_j = np.where(p > 0, np.log(p, where=p > 0), 0.0)
    # dS/dp on occupied cells; per-voxel deposits sum to a constant, so the
    # uniform terms cancel when chained through the kernel derivative.
    ds_dp = (-(log_r[:, None] + 1.0) - (log_f[None, :] + 1.0)
             + s * (log_j + 1.0)) / h_j
    ds_dp[p == 0] = 0.0
    return s, ds_dp / total


# ---------------------------------------------------------------------------
# Similarity through a B-spline transform
# ---------------------------------------------------------------------------

def _identity_world(vol: Volume) -> np.ndarray:
    return world_grid(vol)


def similarity_and_gradient(ref: Volume, flt: Volume, ffd: BSplineTransform,
                            bins: int = DEFAULT_BINS, ranges=None,
                            ref_mask=None, flt_valid=None, with_gradient=True):
    """NMI between ref and flt warped by `ffd`, plus its coefficient gradient.

    The FFD must be defined over the geometry of `ref`. `ref_mask` excludes
    reference voxels; `flt_valid` marks usable voxels of the floating image
    (pairs whose warped sample touches invalid voxels are skipped).
    Returns (nmi, gradient | None).
    """
    world = _identity_world(ref) + dense_displacement(ffd).reshape(-1, 3)
    coords = flt.voxel_from_world(world)
    vals, grad_vox, inside = _trilinear_impl(flt.data, coords, 0.0,
                                             want_gradient=with_gradient)

    mask = inside
    if ref_mask is not None:
        mask = mask & np.asarray(ref_mask, dtype=bool).reshape(-1)
    if flt_valid is not None:
        validity = _trilinear_impl(np.asarray(flt_valid, dtype=np.float64),
                                   coords, 0.0, want_gradient=False)[0]
        mask = mask & (validity >= 0.999)
    if not mask.any():
        raise DegenerateInputError("no overlapping voxels between the images")

    rv = ref.data.reshape(-1).astype(np.float64)[mask]
    fv = vals[mask]
    if ranges is None:
        ranges = (robust_range(rv), robust_range(fv))
    q_r, _, _ = _bin_positions(rv, ranges[0], bins)
    q_f, scale_f, interior_f = _bin_positions(fv, ranges[1], bins)
    counts, (f_r, f_f, w_r) = _deposit_counts(q_r, q_f, bins)

    if not with_gradient:
        return nmi(JointHistogram(bins, counts, int(mask.sum()),
                                  tuple(ranges[0]), tuple(ranges[1]))), None

    s, ds_dc = _nmi_and_count_gradient(counts)
    ds_flat = ds_dc.reshape(-1)

    dw_f, _ = _footprint_weights(q_f, bspline_kernel_d1)
    lam = np.zeros(q_f.shape)
    for dr in range(4):
        idx_r = (f_r - 1 + dr) * bins + f_f - 1
        for df in range(4):
            lam += ds_flat.take(idx_r + df) * w_r[:, dr] * dw_f[:, df]
    # clamped samples sit on the flat part of the intensity mapping
    lam = np.where(interior_f, lam * scale_f, 0.0)

    # d(sample)/d(world displacement): direction @ (voxel gradient / spacing)
    gw = (grad_vox[mask] / np.asarray(flt.spacing)) @ flt.direction.T
    voxel_field = np.zeros((ref.data.size, 3))
    voxel_field[mask] = lam[:, None] * gw
    grad = splat_to_coefficients(ffd, voxel_field.reshape(ref.dims + (3,)))
    return s, grad


# ---------------------------------------------------------------------------
# Bending energy
# ---------------------------------------------------------------------------

# (x order, y order, z order, multiplicity) for the six second derivatives
_BENDING_TERMS = (
    (2, 0, 0, 1.0),
    (0, 2, 0, 1.0),
    (0, 0, 2, 1.0),
    (1, 1, 0, 2.0),
    (0, 1, 1, 2.0),
    (1, 0, 1, 2.0),
)


def _bending(t: BSplineTransform, with_gradient: bool):
    from .transforms import _weight_matrices

    n_vox = float(np.prod(t.reference_dims))
    energy = 0.0
    grad = np.zeros_like(t.coefficients) if with_gradient else None
    for ox, oy, oz, mult in _BENDING_TERMS:
        wx, wy, wz = _weight_matrices(t, (ox, oy, oz))
        fld = np.einsum("ia,jb,kc,abcd->ijkd", wx, wy, wz, t.coefficients,
                        optimize=True)
        energy += mult * float((fld ** 2).sum())
        if with_gradient:
            grad += (2.0 * mult / n_vox) * np.einsum(
                "ia,jb,kc,ijkd->abcd", wx, wy, wz, fld, optimize=True)
    return energy / n_vox, grad


def bending_energy(t: BSplineTransform) -> float:
    """Average over voxels of squared second derivatives of the displacement.

    Derivatives are taken with respect to reference voxel coordinates and
    evaluated analytically from the B-spline basis; cross terms count twice.
    """
    return _bending(t, with_gradient=False)[0]


def bending_energy_gradient(t: BSplineTransform):
    """(energy, d energy / d coefficients)."""
    return _bending(t, with_gradient=True)


# ---------------------------------------------------------------------------
# Inverse-consistency penalty
# ---------------------------------------------------------------------------

def _trilinear_scatter(dims, pts, vecs):
    """Adjoint of edge-clamped trilinear interpolation of a vector field."""
    nx, ny, nz = dims
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3).copy()
    p[:, 0] = np.clip(p[:, 0], 0.0, nx - 1)
    p[:, 1] = np.clip(p[:, 1], 0.0, ny - 1)
    p[:, 2] = np.clip(p[:, 2], 0.0, nz - 1)
    i0 = np.clip(np.floor(p[:, 0]).astype(np.intp), 0, max(nx - 2, 0))
    j0 = np.clip(np.floor(p[:, 1]).astype(np.intp), 0, max(ny - 2, 0))
    k0 = np.clip(np.floor(p[:, 2]).astype(np.intp), 0, max(nz - 2, 0))
    fx, fy, fz = p[:, 0] - i0, p[:, 1] - j0, p[:, 2] - k0

    out = np.zeros((nx * ny * nz, 3))
    size = nx * ny * nz
    for di, wxv in ((0, 1 - fx), (1, fx)):
        ii = np.minimum(i0 + di, nx - 1)
        for dj, wyv in ((0, 1 - fy), (1, fy)):
            jj = np.minimum(j0 + dj, ny - 1)
            for dk, wzv in ((0, 1 - fz), (1, fz)):
                kk = np.minimum(k0 + dk, nz - 1)
                w = wxv * wyv * wzv
                lin = (ii * ny + jj) * nz + kk
                for d in range(3):
                    out[:, d] += np.bincount(lin, weights=w * vecs[:, d],
                                             minlength=size)
    return out.reshape(nx, ny, nz, 3)


def _roundtrip_residual(outer: BSplineTransform, inner: BSplineTransform,
                        dense_outer=None, dense_inner=None):
    """Residual m(x) = u_inner(x) + u_outer(map_inner(x)) at every voxel."""
    if dense_inner is None:
        dense_inner = dense_displacement(inner)
    if dense_outer is None:
        dense_outer = dense_displacement(outer)
    u_in = dense_inner.reshape(-1, 3)
    y_world = world_grid(inner) + u_in
    y_vox = outer.voxel_from_world(y_world)
    u_out = _interp_field_clamped(dense_outer, y_vox)
    return u_in + u_out, y_vox


def _inconsistency(fwd, bwd, with_gradient):
    if not fwd.same_reference(bwd):
        raise GeometryMismatchError("fwd and bwd transforms must share a reference")
    n_vox = float(np.prod(fwd.reference_dims))
    dense_f = dense_displacement(fwd)
    dense_b = dense_displacement(bwd)

    value = 0.0
    grads = []
    for outer, inner, d_out, d_in in ((fwd, bwd, dense_f, dense_b),
                                      (bwd, fwd, dense_b, dense_f)):
        m, y_vox = _roundtrip_residual(outer, inner, d_out, d_in)
        value += float((m ** 2).sum()) / n_vox
        if with_gradient:
            adj = _trilinear_scatter(outer.reference_dims, y_vox, (2.0 / n_vox) * m)
            grads.append(splat_to_coefficients(outer, adj))
    if with_gradient:
        return value, grads[0], grads[1]
    return value, None, None


def inconsistency_penalty(fwd: BSplineTransform, bwd: BSplineTransform) -> float:
    """Voxel-average squared residual of fwd∘bwd plus that of bwd∘fwd (mm^2)."""
    return _inconsistency(fwd, bwd, with_gradient=False)[0]


def inconsistency_gradient(fwd: BSplineTransform, bwd: BSplineTransform):
    """(value, grad wrt fwd, grad wrt bwd).

    Each round-trip term drives only its outer transform; the inner field is
    held fixed (alternating scheme), so each returned gradient is the exact
    derivative of its own term.
    """
    return _inconsistency(fwd, bwd, with_gradient=True)


# ---------------------------------------------------------------------------
# Full objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveResult:
    value: float
    similarity_fwd: float
    similarity_bwd: float
    bending_fwd: float
    bending_bwd: float
    inconsistency: float
    grad_fwd: np.ndarray | None
    grad_bwd: np.ndarray | None


def objective(ref: Volume, flt: Volume, fwd: BSplineTransform,
              bwd: BSplineTransform, weights: ObjectiveWeights,
              bins: int = DEFAULT_BINS, ranges_fwd=None, ranges_bwd=None,
              ref_mask=None, flt_mask=None, with_gradient=True) -> ObjectiveResult:
    """Symmetric registration objective and its coefficient gradients.

    value = (1-a-b) * (S_fwd + S_bwd) - a * (bend_fwd + bend_bwd) - b * C_inc

    where S_fwd is the NMI of flt warped onto ref by `fwd` and S_bwd the NMI
    of ref warped onto flt by `bwd`. `fwd` must be defined over ref's
    geometry and `bwd` over flt's.
    """
    ws = weights.similarity
    s_f, g_sf = similarity_and_gradient(
        ref, flt, fwd, bins=bins, ranges=ranges_fwd,
        ref_mask=ref_mask, flt_valid=flt_mask, with_gradient=with_gradient)
    s_b, g_sb = similarity_and_gradient(
        flt, ref, bwd, bins=bins, ranges=ranges_bwd,
        ref_mask=flt_mask, flt_valid=ref_mask, with_gradient=with_gradient)

    e_f = e_b = c = 0.0
    g_ef = g_eb = g_cf = g_cb = 0.0
    if weights.alpha != 0:
        if with_gradient:
            e_f, g_ef = bending_energy_gradient(fwd)
            e_b, g_eb = bending_energy_gradient(bwd)
        else:
            e_f, e_b = bending_energy(fwd), bending_energy(bwd)
    if weights.beta != 0:
        if with_gradient:
            c, g_cf, g_cb = inconsistency_gradient(fwd, bwd)
        else:
            c = inconsistency_penalty(fwd, bwd)

    value = ws * (s_f + s_b) - weights.alpha * (e_f + e_b) - weights.beta * c
    if not with_gradient:
        return ObjectiveResult(value, s_f, s_b, e_f, e_b, c, None, None)

    grad_fwd = ws * g_sf - weights.alpha * g_ef - weights.beta * g_cf
    grad_bwd = ws * g_sb - weights.alpha * g_eb - weights.beta * g_cb
    return ObjectiveResult(value, s_f, s_b, e_f, e_b, c, grad_fwd, grad_bwd)
