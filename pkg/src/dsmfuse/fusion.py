"""Fuse a stack of co-registered 2.5D depth grids into one surface.

Two fusion operators:

* ``median_fuse``: per-cell median of the valid layer heights.  Robust only
  when many layers overlap; with 2-3 layers single-cell outliers survive as
  salt-and-pepper noise.
* ``adaptive_median_fuse``: per cell, a bilateral weight against the
  reference orthophoto selects an irregular window of similar nearby cells,

      W(x) = exp(-(|x - x0|^2 / (2 delta_s^2) + (I(x) - I(x0))^2 / (2 delta_i^2)))

  and the window is the set of cells with W(x) > gamma (strictly).  The
  median is then taken over every valid height of every layer at every
  window cell, which multiplies the candidate count without pulling values
  across intensity edges, so depth boundaries stay sharp while flat areas
  smooth out.

W(x0) = 1 is the maximum of W, so weights need no further normalization.
The median of an even candidate count is the average of the two middle
values.  Output cells are mutually independent, so fusion can be
partitioned across row blocks (``jobs``) with bit-identical results for
any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .raster import CellIndex, GeometryMismatchError, RasterGrid

TIE_BREAK_AVERAGE = "average-of-two-middles"

_BLOCK_ROWS = 128


@dataclass(frozen=True)
class FusionConfig:
    """Adaptive-window parameters.

    delta_s is in cells, delta_i in gray levels on a 0-255 intensity scale,
    gamma in (0, 1], radius in cells (half-width of the square search
    window).  Only the average-of-two-middles median tie rule is supported.
    """

    delta_s: float = 2.5
    delta_i: float = 15.0
    gamma: float = 0.5
    radius: int = 3
    tie_break: str = TIE_BREAK_AVERAGE

    def __post_init__(self):
        if not self.delta_s > 0:
            raise ValueError(f"delta_s must be > 0, got {self.delta_s}")
        if not self.delta_i > 0:
            raise ValueError(f"delta_i must be > 0, got {self.delta_i}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if self.tie_break != TIE_BREAK_AVERAGE:
            raise ValueError(f"unsupported tie_break {self.tie_break!r}")


@dataclass
class DepthStack:
    """Ordered depth layers sharing a single grid geometry."""

    layers: list[RasterGrid]
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a depth stack needs at least one layer")
        geom = self.layers[0].geometry
        for i, layer in enumerate(self.layers[1:], start=1):
            if layer.geometry != geom:
                raise GeometryMismatchError(
                    f"layer {i} geometry differs from layer 0"
                )
        if not self.ids:
            self.ids = [f"layer-{i}" for i in range(len(self.layers))]
        if len(self.ids) != len(self.layers):
            raise ValueError("ids and layers must have the same length")

    @property
    def geometry(self):
        return self.layers[0].geometry


@dataclass(frozen=True)
class WeightKernel:
    """Evaluation context of the bilateral weight: the window's center.

    center_intensity None means the orthophoto has no data at the center;
    the kernel then degenerates to the spatial term only.
    """

    center: CellIndex
    center_intensity: float | None


@dataclass(frozen=True)
class AdaptiveWindow:
    members: frozenset[CellIndex]

    def __contains__(self, cell: CellIndex) -> bool:
        return cell in self.members

    def __len__(self) -> int:
        return len(self.members)


def weight(
    kernel: WeightKernel,
    x: CellIndex,
    intensity_at_x: float | None,
    cfg: FusionConfig,
) -> float:
    """Bilateral weight of cell x relative to the kernel center, in (0, 1]."""
    dc = x.col - kernel.center.col
    dr = x.row - kernel.center.row
    spatial = (dc * dc + dr * dr) / (2.0 * cfg.delta_s * cfg.delta_s)
    if kernel.center_intensity is None:
        return math.exp(-spatial)
    if intensity_at_x is None:
        raise ValueError("cell intensity required when the center has one")
    di = intensity_at_x - kernel.center_intensity
    return math.exp(-(spatial + di * di / (2.0 * cfg.delta_i * cfg.delta_i)))


def adaptive_window(
    ortho: RasterGrid, center: CellIndex, cfg: FusionConfig
) -> AdaptiveWindow:
    """Irregular window around a cell: all in-bounds cells of the square
    search window whose weight strictly exceeds gamma.

    With a valid center intensity, cells where the orthophoto has no data
    are excluded; with a nodata center the kernel is spatial-only and
    member intensities are irrelevant.
    """
    geom = ortho.geometry
    if not (0 <= center.col < geom.n_cols and 0 <= center.row < geom.n_rows):
        raise ValueError(f"center {center} out of bounds")
    valid = ortho.valid_mask()
    center_intensity = (
        float(ortho.values[center.row, center.col])
        if valid[center.row, center.col]
        else None
    )
    kernel = WeightKernel(center=center, center_intensity=center_intensity)
    members = []
    for row in range(
        max(0, center.row - cfg.radius), min(geom.n_rows, center.row + cfg.radius + 1)
    ):
        for col in range(
            max(0, center.col - cfg.radius), min(geom.n_cols, center.col + cfg.radius + 1)
        ):
            cell = CellIndex(col, row)
            if center_intensity is None:
                w = weight(kernel, cell, None, cfg)
            elif not valid[row, col]:
                continue
            else:
                w = weight(kernel, cell, float(ortho.values[row, col]), cfg)
            if w > cfg.gamma:
                members.append(cell)
    return AdaptiveWindow(members=frozenset(members))


def _nan_median_axis0(a: np.ndarray) -> np.ndarray:
    """Median over axis 0 ignoring NaN; all-NaN columns give NaN.

    Even counts average the two middle order statistics.  Sort-based so the
    result is deterministic and independent of candidate ordering.
    """
    s = np.sort(a, axis=0)  # NaN sorts to the end
    n = np.sum(~np.isnan(a), axis=0)
    safe = np.maximum(n, 1)
    lo = np.take_along_axis(s, ((safe - 1) // 2)[None], axis=0)[0]
    hi = np.take_along_axis(s, (safe // 2)[None], axis=0)[0]
    med = 0.5 * (lo + hi)
    med[n == 0] = np.nan
    return med


def median_fuse(stack: DepthStack) -> RasterGrid:
    """Per-cell median across layers; cells with no valid height get nodata."""
    arr = np.stack([layer.nan_values() for layer in stack.layers])
    med = _nan_median_axis0(arr)
    first = stack.layers[0]
    return RasterGrid.from_nan(stack.geometry, med, first.nodata)


def _window_offsets(cfg: FusionConfig):
    """(drow, dcol, spatial exponent) for offsets that can pass the gate.

    An offset whose pure spatial weight is already <= gamma can never
    produce a member (the intensity factor only shrinks the weight), so it
    is dropped up front.
    """
    out = []
    for di in range(-cfg.radius, cfg.radius + 1):
        for dj in range(-cfg.radius, cfg.radius + 1):
            spatial = (di * di + dj * dj) / (2.0 * cfg.delta_s * cfg.delta_s)
            if math.exp(-spatial) > cfg.gamma:
                out.append((di, dj, spatial))
    return out


def _fuse_block(
    hpad: np.ndarray,
    opad: np.ndarray,
    cfg: FusionConfig,
    n_rows_out: int,
    n_cols: int,
) -> np.ndarray:
    """Fuse one padded row block; hpad is (layers, rows+2r, cols+2r)."""
    rad = cfg.radius
    n_layers = hpad.shape[0]
    i0 = opad[rad : rad + n_rows_out, rad : rad + n_cols]
    i0_nan = np.isnan(i0)
    offsets = _window_offsets(cfg)
    if not offsets:  # gamma = 1 exactly: the strict gate admits no cell
        return np.full((n_rows_out, n_cols), np.nan)
    cands = np.full((len(offsets) * n_layers, n_rows_out, n_cols), np.nan)
    k = 0
    for di, dj, spatial in offsets:
        ix = opad[rad + di : rad + di + n_rows_out, rad + dj : rad + dj + n_cols]
        d = ix - i0
        w = np.exp(-(spatial + d * d / (2.0 * cfg.delta_i * cfg.delta_i)))
        # NaN weights compare False; nodata-center cells fall back to the
        # spatial-only gate, which is True for every offset kept above
        member = np.where(i0_nan, True, w > cfg.gamma)
        for li in range(n_layers):
            h = hpad[li, rad + di : rad + di + n_rows_out, rad + dj : rad + dj + n_cols]
            np.copyto(cands[k], h, where=member)
            k += 1
    return _nan_median_axis0(cands)


def _fuse_block_star(args):
    return _fuse_block(*args)


def adaptive_median_fuse(
    stack: DepthStack,
    ortho: RasterGrid,
    cfg: FusionConfig | None = None,
    jobs: int = 1,
) -> RasterGrid:
    """Adaptive bilateral-weighted median fusion.

    Per output cell, the candidate multiset is every valid height of every
    layer at every member cell of the cell's adaptive window computed on
    ``ortho``; the output is the candidates' median, or nodata when there
    are none.  ``jobs`` > 1 fuses row blocks in parallel processes with
    bit-identical results.
    """
    if cfg is None:
        cfg = FusionConfig()
    if ortho.geometry != stack.geometry:
        raise GeometryMismatchError("orthophoto geometry differs from the stack")
    geom = stack.geometry
    rad = cfg.radius
    pad = [(rad, rad), (rad, rad)]
    hpad = np.stack(
        [np.pad(layer.nan_values(), pad, constant_values=np.nan) for layer in stack.layers]
    )
    opad = np.pad(ortho.nan_values(), pad, constant_values=np.nan)

    spans = [
        (r0, min(r0 + _BLOCK_ROWS, geom.n_rows))
        for r0 in range(0, geom.n_rows, _BLOCK_ROWS)
    ]
    tasks = [
        (
            hpad[:, r0 : r1 + 2 * rad, :],
            opad[r0 : r1 + 2 * rad, :],
            cfg,
            r1 - r0,
            geom.n_cols,
        )
        for r0, r1 in spans
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            blocks = list(pool.map(_fuse_block_star, tasks))
    else:
        blocks = [_fuse_block(*t) for t in tasks]
    fused = np.concatenate(blocks, axis=0)
    first = stack.layers[0]
    return RasterGrid.from_nan(geom, fused, first.nodata)
