"""Coordinate-chart tensor calculus on structured grids.

All derivatives are centered second-order finite differences of the metric
components; Christoffel symbols, the lowered Riemann tensor, Ricci, scalar
curvature and the trace-free Weyl part are assembled algebraically from
those differences.  Curvature is reported on the two-node-inset interior of
every non-periodic axis, so only centered stencils are ever used.

This module is the brute-force oracle for the rest of the package: every
closed-form curvature quantity elsewhere is validated against it.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import SpecError
from .grid import ChartGrid, ChartMetric

__all__ = [
    "CurvatureBundle",
    "SelfDualSplit",
    "curvature",
    "integrate",
    "quadrature_weights",
    "linearized_scalar_curvature",
    "flatten_near_point",
]


@dataclass(frozen=True)
class CurvatureBundle:
    """Curvature fields on the interior sub-grid of a chart metric.

    Tensor fields (christoffel, riemann, ricci, weyl) are present only when
    the bundle was computed with ``fields="full"``; the scalar fields are
    always populated.  ``region`` gives the slices into the parent grid.
    """

    grid: ChartGrid
    region: tuple[slice, ...]
    scalar: np.ndarray          # R
    weyl_norm: np.ndarray       # |W|_g  (fully-raised contraction, >= 0)
    volume_density: np.ndarray  # sqrt(det g)
    christoffel: np.ndarray | None = None  # Gamma^k_ij   (..., k, i, j)
    riemann: np.ndarray | None = None      # R^i_jkl      (..., i, j, k, l)
    ricci: np.ndarray | None = None        # R_ij
    weyl: np.ndarray | None = None         # W^i_jkl
    weyl_lowered: np.ndarray | None = None  # W_ijkl
    # Weyl as an operator on 2-forms in the Cholesky orthonormal frame,
    # indexed by antisymmetric pairs (i<j); feeds the self-dual split
    weyl_pairs_frame: np.ndarray | None = None

    @property
    def has_tensors(self) -> bool:
        return self.riemann is not None


@dataclass(frozen=True)
class SelfDualSplit:
    """Self-dual / anti-self-dual blocks of the Weyl operator (4D only).

    ``w_plus`` / ``w_minus`` are the 3x3 blocks of the Weyl curvature
    operator on 2-forms in an orthonormal frame, expressed in the standard
    eigenbasis of the Hodge star.  Norms are Frobenius norms of the blocks,
    so that |W|^2 = 4(|W+|^2 + |W-|^2) node-wise.
    """

    grid: ChartGrid
    region: tuple[slice, ...]
    w_plus: np.ndarray    # (..., 3, 3)
    w_minus: np.ndarray   # (..., 3, 3)
    norm_plus: np.ndarray
    norm_minus: np.ndarray


# ---------------------------------------------------------------------------
# finite differences


def _offset_view(g: np.ndarray, grid: ChartGrid, region: tuple[slice, ...],
                 offset: tuple[int, ...]) -> np.ndarray:
    """Values of ``g`` at region nodes shifted by ``offset`` (per axis)."""
    out = g
    index: list = []
    take_axes = []
    for ax, off in enumerate(offset):
        sl = region[ax]
        if grid.periodic[ax]:
            if off == 0:
                index.append(slice(None))
            else:
                take_axes.append((ax, off))
                index.append(slice(None))
        else:
            start, stop, _ = sl.indices(grid.extents[ax])
            index.append(slice(start + off, stop + off))
    out = out[tuple(index)]
    for ax, off in take_axes:
        idx = (np.arange(grid.extents[ax]) + off) % grid.extents[ax]
        out = np.take(out, idx, axis=ax)
    return out


def _metric_derivatives(metric: ChartMetric, region: tuple[slice, ...]):
    """Centered first and second derivative fields of g_ij on ``region``.

    Returns (g, dg, ddg) with shapes (...,n,n), (...,n,n,n) [k,i,j] and
    (...,n,n,n,n) [k,l,i,j]; ddg is symmetric in (k,l) and in (i,j).
    """
    grid = metric.grid
    g_full = metric.components
    n = grid.dim
    h = grid.spacing

    def at(*off):
        full = [0] * n
        for ax, k in off:
            full[ax] = k
        return _offset_view(g_full, grid, region, tuple(full))

    g = np.ascontiguousarray(at())
    shape = g.shape[:-2]
    dg = np.empty(shape + (n, n, n))
    ddg = np.empty(shape + (n, n, n, n))
    plus = [at((k, 1)) for k in range(n)]
    minus = [at((k, -1)) for k in range(n)]
    for k in range(n):
        dg[..., k, :, :] = (plus[k] - minus[k]) / (2.0 * h[k])
        ddg[..., k, k, :, :] = (plus[k] - 2.0 * g + minus[k]) / h[k] ** 2
    for k in range(n):
        for l in range(k + 1, n):
            mixed = (at((k, 1), (l, 1)) - at((k, 1), (l, -1))
                     - at((k, -1), (l, 1)) + at((k, -1), (l, -1))) / (4.0 * h[k] * h[l])
            ddg[..., k, l, :, :] = mixed
            ddg[..., l, k, :, :] = mixed
    return g, dg, ddg


# ---------------------------------------------------------------------------
# pointwise curvature algebra


def _christoffel(ginv, dg):
    """Gamma^m_ij = 1/2 g^{ml} (d_i g_lj + d_j g_li - d_l g_ij)."""
    n = ginv.shape[-1]
    sym = (np.ascontiguousarray(np.einsum("bilj->blij", dg))
           + np.einsum("bjli->blij", dg) - dg)
    return 0.5 * np.matmul(ginv, sym.reshape(-1, n, n * n)).reshape(dg.shape)


def _raise_first(ginv, t):
    """Contract g^{ia} into the first tensor slot: out_i... = g^{ia} t_a..."""
    B, n = ginv.shape[0], ginv.shape[-1]
    rest = int(np.prod(t.shape[2:]))
    return np.matmul(ginv, t.reshape(B, n, rest)).reshape(t.shape)


def _pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def _pair_lookup(n: int):
    """(i, j) -> (pair index, sign); sign flips when i > j."""
    table = {}
    for a, (i, j) in enumerate(_pairs(n)):
        table[(i, j)] = (a, 1.0)
        table[(j, i)] = (a, -1.0)
    return table


def _lam2(E: np.ndarray) -> np.ndarray:
    """Induced action of a frame matrix on 2-forms (antisymmetric pairs):
    Q[(i<j),(p<q)] = E_ip E_jq - E_iq E_jp."""
    n = E.shape[-1]
    pr = _pairs(n)
    P = len(pr)
    Q = np.empty(E.shape[:-2] + (P, P))
    for a, (i, j) in enumerate(pr):
        for b, (p, q) in enumerate(pr):
            Q[..., a, b] = E[..., i, p] * E[..., j, q] - E[..., i, q] * E[..., j, p]
    return Q


def _expand_pairs(M: np.ndarray, n: int) -> np.ndarray:
    """Expand a pair-indexed curvature matrix M[(i<j),(k<l)] into the full
    (B,n,n,n,n) tensor using antisymmetry in both pairs."""
    B = M.shape[0]
    pr = _pairs(n)
    T = np.zeros((B, n, n, n, n))
    for a, (i, j) in enumerate(pr):
        for b, (k, l) in enumerate(pr):
            v = M[:, a, b]
            T[:, i, j, k, l] = v
            T[:, j, i, k, l] = -v
            T[:, i, j, l, k] = -v
            T[:, j, i, l, k] = v
    return T


def _curvature_batch(g, dg, ddg, want_tensors: bool):
    """Curvature of a flat batch of nodes: g (B,n,n), dg (B,n,n,n), ddg (B,n,n,n,n).

    The lowered Riemann tensor is assembled directly in the antisymmetric
    pair representation M[(i<j),(k<l)] = R_ijkl, which the centered-difference
    formula supports exactly (all algebraic symmetries hold to rounding).
    """
    B, n = g.shape[0], g.shape[-1]
    ginv = np.linalg.inv(g)
    gamma = _christoffel(ginv, dg)
    pr = _pairs(n)
    P = len(pr)

    # Gamma-squared pair products: GG[b,k,j,l,i] = g_mp Gamma^m_kj Gamma^p_li
    lg = np.matmul(g, gamma.reshape(B, n, n * n))        # (B, n, n*n): g_mp G^p_(kj)
    lgT = np.ascontiguousarray(lg.transpose(0, 2, 1))    # (B, n*n, n)
    GG = np.matmul(lgT, gamma.reshape(B, n, n * n)).reshape(B, n, n, n, n)

    # R_ijkl = 1/2 (dd_kj g_il + dd_li g_kj - dd_ki g_lj - dd_lj g_ik)
    #        + GG[k,j,l,i] - GG[l,j,k,i]
    M = np.empty((B, P, P))
    for a, (i, j) in enumerate(pr):
        for b, (k, l) in enumerate(pr):
            if b < a:
                M[:, a, b] = M[:, b, a]  # pair-swap symmetry is exact
                continue
            M[:, a, b] = 0.5 * (ddg[:, k, j, i, l] + ddg[:, l, i, k, j]
                                - ddg[:, k, i, l, j] - ddg[:, l, j, i, k]) \
                + GG[:, k, j, l, i] - GG[:, l, j, k, i]
    del GG

    # orthonormal frame: E^T g E = I with E = inv(L)^T, L = chol(g)
    L = np.linalg.cholesky(g)
    E = np.linalg.inv(L).transpose(0, 2, 1)
    Q = _lam2(E)
    M_on = np.matmul(Q.transpose(0, 2, 1), np.matmul(M, Q))
    if not want_tensors:
        del M

    # Ricci in the frame: ric_jl = sum_i R_ijil; terms with a repeated index
    # inside either pair vanish by antisymmetry
    look = _pair_lookup(n)
    ricci_on = np.empty((B, n, n))
    for j in range(n):
        for l in range(j, n):
            acc = np.zeros(B)
            for i in range(n):
                if i == j or i == l:
                    continue
                a, s1 = look[(i, j)]
                b, s2 = look[(i, l)]
                acc += s1 * s2 * M_on[:, a, b]
            ricci_on[:, j, l] = acc
            ricci_on[:, l, j] = acc
    scal = 2.0 * np.einsum("baa->b", M_on)

    c1 = 1.0 / (n - 2)
    c2 = 1.0 / ((n - 1) * (n - 2))
    # trace-free part on pairs: W[(ij),(kl)] = M - (d_ik S_jl - d_il S_jk
    #   + S_ik d_jl - S_il d_jk), S = c1 * Ricci - (c2 R / 2) * Id
    S = c1 * ricci_on
    diag = (0.5 * c2) * scal
    for v in range(n):
        S[:, v, v] -= diag
    W = M_on if not want_tensors else M_on.copy()
    for a, (i, j) in enumerate(pr):
        for b, (k, l) in enumerate(pr):
            if i == k:
                W[:, a, b] -= S[:, j, l]
            if i == l:
                W[:, a, b] += S[:, j, k]
            if j == l:
                W[:, a, b] -= S[:, i, k]
            if j == k:
                W[:, a, b] += S[:, i, l]

    wnorm = 2.0 * np.sqrt(np.einsum("xab,xab->x", W, W))
    sqrt_det = np.prod(np.einsum("bii->bi", L), axis=-1)

    out = {"scalar": scal, "weyl_norm": wnorm, "volume_density": sqrt_det}
    if want_tensors:
        # back to coordinate components; inverse frame matrix is L^T
        Qinv = _lam2(np.ascontiguousarray(L.transpose(0, 2, 1)))
        W_coord = np.matmul(Qinv.transpose(0, 2, 1), np.matmul(W, Qinv))
        riem_low = _expand_pairs(M, n)
        weyl_low = _expand_pairs(W_coord, n)
        out["christoffel"] = gamma
        out["riemann"] = _raise_first(ginv, riem_low)
        out["ricci"] = np.matmul(L, np.matmul(ricci_on, L.transpose(0, 2, 1)))
        out["weyl_lowered"] = weyl_low
        out["weyl"] = _raise_first(ginv, weyl_low)
        out["weyl_pairs_frame"] = W
    return out


def curvature(metric: ChartMetric, *, fields: str = "full",
              batch: int = 65536, threads: int | None = None) -> CurvatureBundle:
    """Full curvature of a chart metric on its interior region.

    ``fields="full"`` retains the Christoffel/Riemann/Ricci/Weyl tensor
    fields (memory ~ 5 * n^4 floats per node); ``fields="scalars"`` streams
    the computation and keeps only R, |W| and sqrt(det g).  ``threads``
    defaults to the CONFLAB_THREADS environment variable.
    """
    if fields not in ("full", "scalars"):
        raise SpecError(f"fields must be 'full' or 'scalars', got {fields!r}")
    grid = metric.grid
    n = grid.dim
    region = grid.interior_region()
    g, dg, ddg = _metric_derivatives(metric, region)
    rshape = g.shape[:-2]
    nodes = int(np.prod(rshape))
    want_tensors = fields == "full"

    gf = g.reshape(nodes, n, n)
    dgf = dg.reshape(nodes, n, n, n)
    ddgf = ddg.reshape(nodes, n, n, n, n)

    res = {
        "scalar": np.empty(nodes),
        "weyl_norm": np.empty(nodes),
        "volume_density": np.empty(nodes),
    }
    P = n * (n - 1) // 2
    if want_tensors:
        res["christoffel"] = np.empty((nodes, n, n, n))
        res["riemann"] = np.empty((nodes, n, n, n, n))
        res["ricci"] = np.empty((nodes, n, n))
        res["weyl"] = np.empty((nodes, n, n, n, n))
        res["weyl_lowered"] = np.empty((nodes, n, n, n, n))
        res["weyl_pairs_frame"] = np.empty((nodes, P, P))

    def work(lo: int, hi: int):
        part = _curvature_batch(gf[lo:hi], dgf[lo:hi], ddgf[lo:hi], want_tensors)
        for key, arr in part.items():
            res[key][lo:hi] = arr

    ranges = [(lo, min(lo + batch, nodes)) for lo in range(0, nodes, batch)]
    nthreads = threads if threads is not None else int(os.environ.get("CONFLAB_THREADS", "1") or 1)
    if nthreads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            list(pool.map(lambda r: work(*r), ranges))
    else:
        for lo, hi in ranges:
            work(lo, hi)

    def shaped(key, extra=()):
        return res[key].reshape(rshape + extra) if key in res else None

    return CurvatureBundle(
        grid=grid.subgrid(region),
        region=region,
        scalar=shaped("scalar"),
        weyl_norm=shaped("weyl_norm"),
        volume_density=shaped("volume_density"),
        christoffel=shaped("christoffel", (n, n, n)),
        riemann=shaped("riemann", (n, n, n, n)),
        ricci=shaped("ricci", (n, n)),
        weyl=shaped("weyl", (n, n, n, n)),
        weyl_lowered=shaped("weyl_lowered", (n, n, n, n)),
        weyl_pairs_frame=shaped("weyl_pairs_frame", (P, P)),
    )


# ---------------------------------------------------------------------------
# self-dual / anti-self-dual split (4D)

_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
# Hodge star on the pair basis for an oriented orthonormal frame:
# *(e0^e1)=e2^e3, *(e0^e2)=-e1^e3, *(e0^e3)=e1^e2 (and the star is an involution).
_STAR = np.zeros((6, 6))
for _a, _b, _s in [(0, 5, 1.0), (1, 4, -1.0), (2, 3, 1.0)]:
    _STAR[_a, _b] = _s
    _STAR[_b, _a] = _s

_ISQ2 = 1.0 / np.sqrt(2.0)
# columns span the +1 / -1 eigenspaces of the star
_U_PLUS = np.zeros((6, 3))
_U_MINUS = np.zeros((6, 3))
for _k, (_a, _b, _s) in enumerate([(0, 5, 1.0), (1, 4, -1.0), (2, 3, 1.0)]):
    _U_PLUS[_a, _k] = _ISQ2
    _U_PLUS[_b, _k] = _s * _ISQ2
    _U_MINUS[_a, _k] = _ISQ2
    _U_MINUS[_b, _k] = -_s * _ISQ2


def selfdual_split(bundle: CurvatureBundle, metric: ChartMetric,
                   orientation: int = 1) -> SelfDualSplit:
    """Decompose the Weyl operator on 2-forms into its self-dual and
    anti-self-dual blocks with respect to (metric, orientation).

    The coordinate axis order defines the reference orientation;
    ``orientation=-1`` reverses it (swapping the blocks).
    """
    if metric.grid.dim != 4:
        raise SpecError("self-dual split requires dim = 4")
    if orientation not in (1, -1):
        raise SpecError("orientation must be +1 or -1")
    if bundle.weyl_pairs_frame is None:
        raise SpecError("bundle must carry tensor fields (fields='full')")

    shape = bundle.weyl_pairs_frame.shape[:-2]
    B = int(np.prod(shape))
    M = bundle.weyl_pairs_frame.reshape(B, 6, 6)

    if orientation == -1:
        up, um = _U_MINUS, _U_PLUS
    else:
        up, um = _U_PLUS, _U_MINUS
    mp = np.einsum("pa,bpq,qc->bac", up, M, up, optimize=True)
    mm = np.einsum("pa,bpq,qc->bac", um, M, um, optimize=True)
    np_norm = np.sqrt(np.einsum("bac,bac->b", mp, mp))
    nm_norm = np.sqrt(np.einsum("bac,bac->b", mm, mm))
    return SelfDualSplit(
        grid=bundle.grid, region=bundle.region,
        w_plus=mp.reshape(shape + (3, 3)),
        w_minus=mm.reshape(shape + (3, 3)),
        norm_plus=np_norm.reshape(shape),
        norm_minus=nm_norm.reshape(shape),
    )


# ---------------------------------------------------------------------------
# quadrature


def quadrature_weights(grid: ChartGrid, rule: str = "trapezoid") -> np.ndarray:
    """Tensor-product quadrature weights: trapezoid (or midpoint) per bounded
    axis, uniform weights on periodic axes."""
    if rule not in ("trapezoid", "midpoint"):
        raise SpecError(f"unknown quadrature rule {rule!r}")
    w = np.ones(())
    for ax in range(grid.dim):
        e, h = grid.extents[ax], grid.spacing[ax]
        wa = np.full(e, h)
        if not grid.periodic[ax] and rule == "trapezoid":
            wa[0] *= 0.5
            wa[-1] *= 0.5
        w = np.multiply.outer(w, wa)
    return w


def integrate(field: np.ndarray, metric: ChartMetric, weights: str = "trapezoid") -> float:
    """Integral of a scalar field against the metric volume form:
    sum(field * sqrt(det g) * weights)."""
    field = np.asarray(field, dtype=float)
    if field.shape != metric.grid.shape:
        raise SpecError(f"field shape {field.shape} does not match grid {metric.grid.shape}")
    w = quadrature_weights(metric.grid, weights)
    return float(np.sum(field * metric.sqrt_det() * w))


# ---------------------------------------------------------------------------
# linearization of scalar curvature


def linearized_scalar_curvature(h: ChartMetric, theta: np.ndarray) -> np.ndarray:
    """First variation of scalar curvature at h in the direction theta:

        P(theta) = -Lap(tr theta) + div div theta - <Ric, theta>

    evaluated node-wise on the interior region.  The residual of the full
    nonlinear scalar curvature, R(h + theta) - R(h) - P(theta), is
    quadratically small in theta.
    """
    grid = h.grid
    n = grid.dim
    theta = np.asarray(theta, dtype=float)
    if theta.shape != grid.shape + (n, n):
        raise SpecError("theta must be a symmetric 2-tensor field on the grid")
    if not np.allclose(theta, np.swapaxes(theta, -1, -2)):
        raise SpecError("theta must be symmetric")
    try:
        ChartMetric(grid, h.components + 0.5 * (theta + np.swapaxes(theta, -1, -2)))
    except SpecError as exc:
        raise SpecError(f"h + theta is not positive definite: {exc}") from exc

    region = grid.interior_region()
    g, dg, ddg = _metric_derivatives(h, region)
    shape = g.shape[:-2]
    B = int(np.prod(shape))
    gf, dgf, ddgf = (a.reshape((B,) + a.shape[len(shape):]) for a in (g, dg, ddg))
    ginv = np.linalg.inv(gf)
    sym = (np.einsum("bilj->blij", dgf) + np.einsum("bjli->blij", dgf) - dgf)
    gamma = 0.5 * np.einsum("bml,blij->bmij", ginv, sym, optimize=True)
    # dgamma[b,a,m,i,j] = d_a Gamma^m_ij, from dginv and ddg
    dginv = -np.einsum("bim,bamn,bnj->baij", ginv, dgf, ginv, optimize=True)
    dsym = (np.einsum("bailj->balij", ddgf) + np.einsum("bajli->balij", ddgf) - ddgf)
    dgamma = 0.5 * (np.einsum("baml,blij->bamij", dginv, sym, optimize=True)
                    + np.einsum("bml,balij->bamij", ginv, dsym, optimize=True))
    del dsym, dginv, sym

    ricci = _ricci_from_gamma(gamma, dgamma)

    # derivative fields of theta on the same region
    th, dth, ddth = _metric_derivatives(_FieldOnGrid(grid, theta), region)  # type: ignore[arg-type]
    thf = th.reshape(B, n, n)
    dthf = dth.reshape(B, n, n, n)
    ddthf = ddth.reshape(B, n, n, n, n)

    # (D_c th)_ij = d_c th_ij - Gamma^m_ci th_mj - Gamma^m_cj th_im
    Dth = (dthf
           - np.einsum("bmci,bmj->bcij", gamma, thf, optimize=True)
           - np.einsum("bmcj,bim->bcij", gamma, thf, optimize=True))
    # d_a (D_c th)_ij, expanded so only stored derivative fields are needed
    dDth = (ddthf
            - np.einsum("bamci,bmj->bacij", dgamma, thf, optimize=True)
            - np.einsum("bmci,bamj->bacij", gamma, dthf, optimize=True)
            - np.einsum("bamcj,bim->bacij", dgamma, thf, optimize=True)
            - np.einsum("bmcj,baim->bacij", gamma, dthf, optimize=True))
    # (D_a D_c th)_ij = d_a (D_c th)_ij - G^m_ac (D_m th)_ij
    #                   - G^m_ai (D_c th)_mj - G^m_aj (D_c th)_im
    DDth = (dDth
            - np.einsum("bmac,bmij->bacij", gamma, Dth, optimize=True)
            - np.einsum("bmai,bcmj->bacij", gamma, Dth, optimize=True)
            - np.einsum("bmaj,bcim->bacij", gamma, Dth, optimize=True))
    del dDth

    # Lap(tr th) = g^{ac} D_a D_c (g^{ij} th_ij) = g^{ac} g^{ij} (D_a D_c th)_ij
    lap_tr = np.einsum("bac,bij,bacij->b", ginv, ginv, DDth, optimize=True)
    divdiv = np.einsum("bai,bcj,bacij->b", ginv, ginv, DDth, optimize=True)
    ric_pair = np.einsum("bki,blj,bkl,bij->b", ginv, ginv, ricci, thf, optimize=True)
    P = -lap_tr + divdiv - ric_pair
    return P.reshape(shape)


def _ricci_from_gamma(gamma: np.ndarray, dgamma: np.ndarray) -> np.ndarray:
    """Ricci tensor from Gamma and its coordinate derivative:
    R_jl = d_a Gamma^a_lj - d_l Gamma^a_aj + G^a_am G^m_lj - G^a_lm G^m_aj."""
    t1 = np.einsum("baalj->bjl", dgamma, optimize=True)
    t2 = np.einsum("blaaj->bjl", dgamma, optimize=True)
    tr_gamma = np.einsum("baam->bm", gamma, optimize=True)
    t3 = np.einsum("bm,bmlj->bjl", tr_gamma, gamma, optimize=True)
    t4 = np.einsum("balm,bmaj->bjl", gamma, gamma, optimize=True)
    return t1 - t2 + t3 - t4


class _FieldOnGrid:
    """Adapter so tensor fields reuse the metric finite-difference machinery."""

    def __init__(self, grid: ChartGrid, values: np.ndarray):
        self.grid = grid
        self.components = values


# ---------------------------------------------------------------------------
# conformal flattening near a point


def _log_radius_cutoff(delta: float):
    """Radial cutoff w(r): 1 for r <= eps, 0 for r >= delta, interpolated by a
    cubic smoothstep in log(r).  The transition is long enough in log-scale
    that |r w'(r)| and |r^2 w''(r)| stay below 0.95*delta by construction.

    Returns (eps, w, w1, w2) with w1 = dw/dr, w2 = d2w/dr2 (vectorized).
    """
    if not (0 < delta):
        raise SpecError("delta must be positive")
    target = 0.95 * delta  # 5% margin under the required strict bounds
    # bounds for the cubic smoothstep in s = log r over a window of length S:
    #   |dw/ds| <= 1.5/S          -> |r w'| <= 1.5/S
    #   |d2w/ds2| <= 6/S^2        -> |r^2 w''| <= 6/S^2 + 1.5/S
    S = (1.5 + np.sqrt(2.25 + 24.0 * target)) / (2.0 * target)
    S *= 1.02  # small pad so the bounds are strict
    eps = delta * np.exp(-S)
    s1 = np.log(delta)
    s0 = s1 - S

    def _u(r):
        return np.clip((np.log(np.maximum(r, 1e-300)) - s0) / S, 0.0, 1.0)

    def w(r):
        u = _u(r)
        return 1.0 - (3 * u**2 - 2 * u**3)

    def w1(r):
        r = np.asarray(r, dtype=float)
        u = _u(r)
        active = (u > 0) & (u < 1) & (r > 0)
        du = -(6 * u - 6 * u**2) / S
        return np.where(active, du / np.maximum(r, 1e-300), 0.0)

    def w2(r):
        r = np.asarray(r, dtype=float)
        u = _u(r)
        active = (u > 0) & (u < 1) & (r > 0)
        du = -(6 * u - 6 * u**2) / S
        ddu = -(6 - 12 * u) / S**2
        return np.where(active, (ddu - du) / np.maximum(r, 1e-300) ** 2, 0.0)

    return eps, w, w1, w2


def flatten_near_point(g: ChartMetric, o: tuple[int, ...], delta: float) -> ChartMetric:
    """Blend ``g`` with a conformally flat metric near the node ``o``.

    The replacement metric gbar = exp(2*psi) * F matches the 1-jet of g at o
    (F is a flat metric built from the Christoffel symbols at o) and has the
    same scalar curvature at o (psi is a quadratic adjusted for that).  The
    blend g_delta = g + w(r) * (gbar - g) equals gbar inside the (tiny) inner
    radius of the cutoff and g exactly outside radius delta.
    """
    grid = g.grid
    n = grid.dim
    o = tuple(int(k) for k in o)
    if len(o) != n:
        raise SpecError("o must be a full node multi-index")
    region = grid.interior_region()
    for ax, sl in enumerate(region):
        start, stop, _ = sl.indices(grid.extents[ax])
        if not (start <= o[ax] < stop):
            raise SpecError(f"node {o} is not interior (axis {ax})")
    x_o = np.array([grid.coords(ax)[o[ax]] for ax in range(n)])
    # distance from o to the chart boundary, in coordinates
    bdist = min(
        min(x_o[ax] - grid.coords(ax)[0], grid.coords(ax)[-1] - x_o[ax])
        for ax in range(n) if not grid.periodic[ax]
    )
    if not (0 < delta < bdist):
        raise SpecError(f"delta must lie in (0, {bdist:.6g}) for this node, got {delta}")

    # 1-jet data of g at o, by centered differences
    g_o = g.components[o]
    dg_o = np.empty((n, n, n))
    for k in range(n):
        up = list(o)
        dn = list(o)
        up[k] += 1
        dn[k] -= 1
        dg_o[k] = (g.components[tuple(up)] - g.components[tuple(dn)]) / (2 * grid.spacing[k])
    ginv_o = np.linalg.inv(g_o)
    gamma_o = 0.5 * np.einsum("ml,lij->mij",
                              ginv_o,
                              dg_o.transpose(1, 0, 2) + dg_o.transpose(2, 0, 1) - dg_o)

    # scalar curvature at o from the full oracle
    bundle = curvature(g, fields="scalars")
    rel = tuple(o[ax] - region[ax].indices(grid.extents[ax])[0] if not grid.periodic[ax]
                else o[ax] for ax in range(n))
    R_o = float(bundle.scalar[rel])
    lam = -R_o / (2.0 * n * (n - 1))

    xs = grid.mesh()
    v = np.stack([x - x_o[ax] for ax, x in enumerate(xs)], axis=-1)  # (..., n)
    # flat metric F = (I + Gamma.v)^T g(o) (I + Gamma.v): matches g and dg at o
    J = np.eye(n) + np.einsum("mjk,...k->...mj", gamma_o, v)
    F = np.einsum("...mi,mn,...nj->...ij", J, g_o, J, optimize=True)
    # conformal factor psi = lam/2 * v^T g(o) v: fixes R_gbar(o) = R_g(o)
    quad = np.einsum("...i,ij,...j->...", v, g_o, v)
    gbar = np.exp(lam * quad)[..., None, None] * F

    r = np.sqrt(np.maximum(quad, 0.0))  # g(o)-calibrated radius
    _, w, _, _ = _log_radius_cutoff(delta)
    wr = w(r)[..., None, None]
    gd = g.components + wr * (gbar - g.components)
    gd = 0.5 * (gd + np.swapaxes(gd, -1, -2))
    # exact equality with g outside the cutoff support
    outside = (r >= delta)
    gd[outside] = g.components[outside]
    return ChartMetric(grid, gd)
