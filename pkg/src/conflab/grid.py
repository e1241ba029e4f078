"""Structured coordinate grids and metric fields on them.

A :class:`ChartGrid` is a uniform tensor-product grid in local coordinates.
Bounded axes are centered on 0 (node ``i`` sits at ``(i - (E-1)/2) * h``),
periodic axes start at 0 (nodes at ``i * h``, wrapping at ``E * h``).

A :class:`ChartMetric` samples the metric components ``g_ij`` at every grid
node.  Built-in generators cover the flat metric, the unit round sphere in
stereographic coordinates and the Fubini-Study metric of the complex
projective plane in an affine chart; anything else is supplied explicitly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SpecError

__all__ = [
    "ChartGrid",
    "ChartMetric",
    "flat_metric",
    "round_sphere_metric",
    "fubini_study_metric",
    "explicit_metric",
    "metric_from_spec",
    "load_metric_spec",
]

MIN_EXTENT = 5  # five-point stencils must fit


@dataclass(frozen=True)
class ChartGrid:
    """A uniform coordinate grid with per-axis extent, spacing, periodicity."""

    dim: int
    extents: tuple[int, ...]
    spacing: tuple[float, ...]
    periodic: tuple[bool, ...]

    def __post_init__(self):
        if self.dim < 3:
            raise SpecError(f"grid dim must be >= 3, got {self.dim}")
        for name, seq in (("extents", self.extents), ("spacing", self.spacing),
                          ("periodic", self.periodic)):
            if len(seq) != self.dim:
                raise SpecError(f"{name} must have length dim={self.dim}, got {len(seq)}")
        for ax, e in enumerate(self.extents):
            if int(e) != e or e < MIN_EXTENT:
                raise SpecError(f"extents[{ax}] = {e}: every extent must be an integer >= {MIN_EXTENT}")
        for ax, h in enumerate(self.spacing):
            if not (h > 0):
                raise SpecError(f"spacing[{ax}] = {h}: spacing must be > 0 on every axis")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.extents

    def coords(self, axis: int) -> np.ndarray:
        """Node coordinates along one axis."""
        e, h = self.extents[axis], self.spacing[axis]
        idx = np.arange(e, dtype=float)
        if self.periodic[axis]:
            return idx * h
        return (idx - (e - 1) / 2.0) * h

    def mesh(self) -> list[np.ndarray]:
        """Coordinate arrays broadcast over the full grid (ij indexing)."""
        return list(np.meshgrid(*[self.coords(ax) for ax in range(self.dim)], indexing="ij"))

    def interior_region(self, margin: int = 2) -> tuple[slice, ...]:
        """Slices selecting the interior: ``margin`` nodes trimmed from each
        end of every non-periodic axis; periodic axes untouched."""
        out = []
        for ax in range(self.dim):
            if self.periodic[ax]:
                out.append(slice(None))
            else:
                if self.extents[ax] <= 2 * margin:
                    raise SpecError(f"axis {ax} too small for a {margin}-node margin")
                out.append(slice(margin, self.extents[ax] - margin))
        return tuple(out)

    def subgrid(self, region: tuple[slice, ...]) -> "ChartGrid":
        """The grid covering ``region`` (same spacing; bounded axes shrink).

        Derived grids may be smaller than the 5-node minimum required of
        charts that are differentiated; they are only integrated over.
        """
        extents = []
        periodic = []
        for ax, sl in enumerate(region):
            start, stop, step = sl.indices(self.extents[ax])
            if step != 1:
                raise SpecError("subgrid regions must be contiguous")
            n = stop - start
            if n < 1:
                raise SpecError(f"empty subgrid region on axis {ax}")
            extents.append(n)
            periodic.append(self.periodic[ax] and n == self.extents[ax])
        out = object.__new__(ChartGrid)
        object.__setattr__(out, "dim", self.dim)
        object.__setattr__(out, "extents", tuple(extents))
        object.__setattr__(out, "spacing", self.spacing)
        object.__setattr__(out, "periodic", tuple(periodic))
        return out


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ChartMetric:
    """Metric components g_ij sampled on a grid.

    ``components`` has shape ``grid.shape + (n, n)``; it is validated to be
    exactly symmetric and positive definite at every node.
    """

    grid: ChartGrid
    components: np.ndarray

    def __post_init__(self):
        n = self.grid.dim
        want = self.grid.shape + (n, n)
        if self.components.shape != want:
            raise SpecError(f"components shape {self.components.shape} != {want}")
        g = np.asarray(self.components, dtype=float)
        if not np.array_equal(g, np.swapaxes(g, -1, -2)):
            raise SpecError("metric components must be exactly symmetric (g_ij = g_ji)")
        _assert_positive_definite(g, self.grid)
        object.__setattr__(self, "components", _freeze(g))

    @property
    def dim(self) -> int:
        return self.grid.dim

    def restricted(self, region: tuple[slice, ...]) -> "ChartMetric":
        """The metric restricted to a contiguous sub-region."""
        sub = self.grid.subgrid(region)
        return ChartMetric(sub, np.ascontiguousarray(self.components[region]))

    def sqrt_det(self) -> np.ndarray:
        return np.sqrt(np.linalg.det(self.components))


def _assert_positive_definite(g: np.ndarray, grid: ChartGrid) -> None:
    try:
        np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        # locate the first offending node for the error message
        flat = g.reshape(-1, g.shape[-1], g.shape[-1])
        for k in range(flat.shape[0]):
            try:
                np.linalg.cholesky(flat[k])
            except np.linalg.LinAlgError:
                node = np.unravel_index(k, grid.shape)
                raise SpecError(f"metric is not positive definite at node {node}") from None
        raise


# ---------------------------------------------------------------------------
# generators


def flat_metric(grid: ChartGrid) -> ChartMetric:
    """g_ij = delta_ij at every node."""
    n = grid.dim
    g = np.zeros(grid.shape + (n, n))
    g[...] = np.eye(n)
    return ChartMetric(grid, g)


def round_sphere_metric(grid: ChartGrid) -> ChartMetric:
    """Unit round sphere in stereographic coordinates:
    g = (2 / (1 + |x|^2))^2 * delta.  Scalar curvature n(n-1)."""
    if any(grid.periodic):
        raise SpecError("stereographic chart must be non-periodic")
    xs = grid.mesh()
    r2 = sum(x * x for x in xs)
    conf = (2.0 / (1.0 + r2)) ** 2
    n = grid.dim
    g = np.zeros(grid.shape + (n, n))
    for i in range(n):
        g[..., i, i] = conf
    return ChartMetric(grid, g)


def fubini_study_metric(grid: ChartGrid) -> ChartMetric:
    """Fubini-Study metric of the complex projective plane in an affine chart.

    Real coordinates are interleaved as (x1, y1, x2, y2) with z_a = x_a + i*y_a,
    so the coordinate orientation is the complex orientation.  The Hermitian
    components are h_ab = [(1+|z|^2) delta_ab - conj(z_a) z_b] / (1+|z|^2)^2
    and the real metric is 2*Re(h_ab dz_a dconj(z_b)).
    """
    if grid.dim != 4:
        raise SpecError("the affine chart of the projective plane is 4-dimensional")
    if any(grid.periodic):
        raise SpecError("affine chart must be non-periodic")
    x1, y1, x2, y2 = grid.mesh()
    z = np.stack([x1 + 1j * y1, x2 + 1j * y2], axis=-1)  # (..., 2)
    r2 = np.sum(np.abs(z) ** 2, axis=-1)
    denom = (1.0 + r2) ** 2
    h = np.zeros(grid.shape + (2, 2), dtype=complex)
    for a in range(2):
        for b in range(2):
            h[..., a, b] = ((a == b) * (1.0 + r2) - np.conj(z[..., a]) * z[..., b]) / denom
    A = h.real  # symmetric
    B = h.imag  # antisymmetric
    g = np.zeros(grid.shape + (4, 4))
    # block structure in (x1, x2; y1, y2), then interleave to (x1, y1, x2, y2)
    order = [0, 2, 1, 3]  # position of x1, x2, y1, y2 within the interleaved axes
    for a in range(2):
        for b in range(2):
            xa, xb = order[a], order[b]
            ya, yb = order[2 + a], order[2 + b]
            g[..., xa, xb] = 2 * A[..., a, b]
            g[..., ya, yb] = 2 * A[..., a, b]
            g[..., xa, yb] = 2 * B[..., a, b]
            g[..., yb, xa] = 2 * B[..., a, b]
    g = 0.5 * (g + np.swapaxes(g, -1, -2))  # kill rounding asymmetry exactly
    return ChartMetric(grid, g)


def explicit_metric(grid: ChartGrid, components) -> ChartMetric:
    return ChartMetric(grid, np.asarray(components, dtype=float))


# ---------------------------------------------------------------------------
# JSON metric specs

_GENERATORS = {
    "flat": flat_metric,
    "round_sphere_stereographic": round_sphere_metric,
    "fubini_study_affine": fubini_study_metric,
}


def metric_from_spec(spec: dict) -> ChartMetric:
    """Build a ChartMetric from a parsed metric-spec document.

    Schema: {"kind": "chart", "dim": n, "extents": [...], "spacing": [...],
    "periodic": [...], "generator": "flat" | "round_sphere_stereographic" |
    "fubini_study_affine" | "explicit", "components": [...] (iff explicit)}.
    """
    if not isinstance(spec, dict):
        raise SpecError("metric spec must be a JSON object")
    if spec.get("kind") != "chart":
        raise SpecError(f"$.kind: expected 'chart', got {spec.get('kind')!r}")
    for key in ("dim", "extents", "spacing", "periodic", "generator"):
        if key not in spec:
            raise SpecError(f"$.{key}: missing required key")
    try:
        grid = ChartGrid(
            dim=int(spec["dim"]),
            extents=tuple(int(e) for e in spec["extents"]),
            spacing=tuple(float(h) for h in spec["spacing"]),
            periodic=tuple(bool(p) for p in spec["periodic"]),
        )
    except (TypeError, ValueError) as exc:
        raise SpecError(f"$.extents/spacing/periodic: {exc}") from exc
    gen = spec["generator"]
    if gen == "explicit":
        if "components" not in spec:
            raise SpecError("$.components: required when generator = 'explicit'")
        return explicit_metric(grid, np.asarray(spec["components"], dtype=float))
    if gen not in _GENERATORS:
        raise SpecError(f"$.generator: unknown generator {gen!r}")
    if "components" in spec:
        raise SpecError("$.components: only allowed when generator = 'explicit'")
    return _GENERATORS[gen](grid)


def load_metric_spec(path: str | Path) -> ChartMetric:
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from exc
    return metric_from_spec(spec)
