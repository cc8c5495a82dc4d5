"""DSM-to-DSM alignment and the RMSE evaluation protocol.

The alignment model is a pure 3-parameter translation (dx, dy, dz): the
rotational differences between DSM pairs of the same scene are ignorable,
so a shift absorbs essentially all of the systematic orientation error.
``AlignmentResult.shift`` is the correction to apply to the moving grid:
translating its content by (+dx east, +dy north) and raising heights by
+dz best aligns it to the reference, i.e.

    aligned(x, y) = moving(x - dx, y - dy) + dz

Estimation is coarse-to-fine: an integer-cell grid search over
+-max_search cells picks the basin (plain least squares alone can miss it
when the misalignment exceeds a few cells), then Gauss-Newton refines to
sub-cell precision with central-difference height gradients and bilinear
interpolation.  Both the interpolation and the gradients live on the
reference side: each moving cell keeps its raw height and is compared to
the reference sampled at the inversely shifted position.  Blunders in the
moving grid (the noisy one, in this protocol) therefore stay unblended
and the threshold gate removes them cleanly instead of letting diluted
fractions of them leak into the fit.  The vertical offset has a closed
form (the mean inlier height difference) and is recomputed every
iteration, as is the inlier set: cells whose dz-corrected difference
exceeds the blunder threshold (vegetation growth, seasonal change) drop
out of the fit.

Evaluation is two-stage: minimize on inliers only, then report the RMSE
of every mutually valid cell, blunders included.

Height gradients are the only alignment signal, so the horizontal shift is
ill-determined on relief-free surfaces: on flat ground with isolated
buildings, the blunder gate absorbs edge misfits and many translations
score alike.  For inputs known to share a grid (synthetic stacks), set
max_search to 0 to fit the vertical offset alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raster import GeometryMismatchError, RasterGrid, resample

_MIN_OVERLAP_CELLS = 100
_DZ_FIXED_POINT_ROUNDS = 2


class InsufficientOverlapError(ValueError):
    """Too few mutually valid cells to constrain the alignment."""


@dataclass(frozen=True)
class AlignConfig:
    blunder_threshold: float = 6.0
    max_search: int = 10
    max_iterations: int = 50
    convergence_tol: float = 1e-4  # cells

    def __post_init__(self):
        if not self.blunder_threshold > 0:
            raise ValueError("blunder_threshold must be > 0")
        if self.max_search < 0:
            raise ValueError("max_search must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class AlignmentResult:
    shift: tuple[float, float, float]
    rmse_inliers: float
    rmse_all: float
    n_inliers: int
    n_total: int
    converged: bool


def rmse(
    a: RasterGrid,
    b: RasterGrid,
    include_blunders: bool = True,
    threshold: float = 6.0,
) -> tuple[float, int]:
    """Root mean square height difference over mutually valid cells.

    With include_blunders False, cells whose absolute difference exceeds
    the threshold are excluded.  Returns (rmse, cell count); (nan, 0) when
    the blunder filter removes everything.
    """
    if a.geometry != b.geometry:
        raise GeometryMismatchError("rmse needs a common geometry")
    d = a.nan_values() - b.nan_values()
    d = d[np.isfinite(d)]
    if d.size == 0:
        raise InsufficientOverlapError("no mutually valid cells")
    if not include_blunders:
        d = d[np.abs(d) <= threshold]
        if d.size == 0:
            return float("nan"), 0
    return float(np.sqrt(np.mean(d * d))), int(d.size)


def _int_shift(a: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Array sampled at (r + dr, c + dc); out-of-range becomes NaN."""
    n_rows, n_cols = a.shape
    out = np.full_like(a, np.nan)
    rd0, rd1 = max(0, -dr), min(n_rows, n_rows - dr)
    cd0, cd1 = max(0, -dc), min(n_cols, n_cols - dc)
    if rd0 < rd1 and cd0 < cd1:
        out[rd0:rd1, cd0:cd1] = a[rd0 + dr : rd1 + dr, cd0 + dc : cd1 + dc]
    return out


def _sample_at_offset(a: np.ndarray, dr: float, dc: float) -> np.ndarray:
    """Bilinear sample of the whole array at (r + dr, c + dc).

    The offset is uniform, so the sample is a fixed-weight blend of four
    integer-shifted copies; NaN neighbors propagate.  Near-integer offsets
    snap so integer shifts stay exact.
    """
    if abs(dr - round(dr)) < 1e-12:
        dr = round(dr)
    if abs(dc - round(dc)) < 1e-12:
        dc = round(dc)
    r0 = math.floor(dr)
    c0 = math.floor(dc)
    fr = dr - r0
    fc = dc - c0
    if fr == 0 and fc == 0:
        return _int_shift(a, int(r0), int(c0))
    v00 = _int_shift(a, r0, c0)
    v01 = _int_shift(a, r0, c0 + 1)
    v10 = _int_shift(a, r0 + 1, c0)
    v11 = _int_shift(a, r0 + 1, c0 + 1)
    return (
        (1 - fr) * (1 - fc) * v00
        + (1 - fr) * fc * v01
        + fr * (1 - fc) * v10
        + fr * fc * v11
    )


def _dz_and_inliers(d: np.ndarray, threshold: float):
    """Closed-form vertical offset and blunder gate for a difference map.

    d holds aligned-minus-reference differences (NaN where invalid); the
    model is d + dz = 0.  Seeded with the median for robustness, then a
    couple of fixed-point rounds of (gate, mean).
    """
    finite = np.isfinite(d)
    if not finite.any():
        return 0.0, finite
    dz = -float(np.nanmedian(d))
    inliers = finite
    for _ in range(_DZ_FIXED_POINT_ROUNDS):
        inliers = finite & (np.abs(d + dz) <= threshold)
        if not inliers.any():
            return dz, inliers
        dz = -float(np.mean(d[inliers]))
    return dz, inliers


def _inlier_rms(d: np.ndarray, dz: float, inliers: np.ndarray) -> float:
    if not inliers.any():
        return math.inf
    r = d[inliers] + dz
    return float(np.sqrt(np.mean(r * r)))


def align(
    moving: RasterGrid, reference: RasterGrid, cfg: AlignConfig | None = None
) -> AlignmentResult:
    """Estimate the translation aligning a moving DSM to a reference."""
    if cfg is None:
        cfg = AlignConfig()
    cell = reference.geometry.cell_size
    mov = resample(moving, reference.geometry, "bilinear").nan_values()
    ref = reference.nan_values()

    overlap = np.isfinite(mov) & np.isfinite(ref)
    if np.count_nonzero(overlap) < _MIN_OVERLAP_CELLS:
        raise InsufficientOverlapError(
            f"only {np.count_nonzero(overlap)} mutually valid cells, "
            f"need {_MIN_OVERLAP_CELLS}"
        )

    # Residuals compare each moving cell to the reference sampled at the
    # inversely shifted position: d = mov - ref(r - v, c + u), where u
    # counts cells east and v cells north.  Coarse stage: integer grid
    # search minimizing inlier RMSE.
    best = (math.inf, 0, 0)
    for v in range(-cfg.max_search, cfg.max_search + 1):
        for u in range(-cfg.max_search, cfg.max_search + 1):
            d = mov - _int_shift(ref, -v, u)
            dz, inl = _dz_and_inliers(d, cfg.blunder_threshold)
            score = _inlier_rms(d, dz, inl)
            if score < best[0]:
                best = (score, u, v)
    _, u, v = best
    u = float(u)
    v = float(v)

    # sub-cell Gauss-Newton on (u, v), dz closed-form per iteration;
    # gradients are central differences of the reference, per cell
    grad_col = np.full_like(ref, np.nan)
    grad_col[:, 1:-1] = (ref[:, 2:] - ref[:, :-2]) * 0.5
    grad_row = np.full_like(ref, np.nan)
    grad_row[1:-1, :] = (ref[2:, :] - ref[:-2, :]) * 0.5

    converged = False
    best_state = None
    for _ in range(cfg.max_iterations):
        d = mov - _sample_at_offset(ref, -v, u)
        dz, inl = _dz_and_inliers(d, cfg.blunder_threshold)
        score = _inlier_rms(d, dz, inl)
        if best_state is None or score < best_state[0]:
            best_state = (score, u, v, dz)

        gc = _sample_at_offset(grad_col, -v, u)
        gr = _sample_at_offset(grad_row, -v, u)
        use = inl & np.isfinite(gc) & np.isfinite(gr)
        if np.count_nonzero(use) < 3:
            break
        res = d[use] + dz
        # residual = mov + dz - ref(r - v, c + u): d/du = -gc, d/dv = +gr
        ju = -gc[use]
        jv = gr[use]
        ata = np.array(
            [[np.dot(ju, ju), np.dot(ju, jv)], [np.dot(ju, jv), np.dot(jv, jv)]]
        )
        atb = -np.array([np.dot(ju, res), np.dot(jv, res)])
        try:
            step = np.linalg.solve(ata, atb)
        except np.linalg.LinAlgError:
            break
        u += float(step[0])
        v += float(step[1])
        if max(abs(step[0]), abs(step[1])) < cfg.convergence_tol:
            converged = True
            break

    # final statistics at the best state seen
    if converged:
        d = mov - _sample_at_offset(ref, -v, u)
        dz, inl = _dz_and_inliers(d, cfg.blunder_threshold)
    else:
        _, u, v, dz = best_state
        d = mov - _sample_at_offset(ref, -v, u)
        inl = np.isfinite(d) & (np.abs(d + dz) <= cfg.blunder_threshold)

    finite = np.isfinite(d)
    rmse_inl = _inlier_rms(d, dz, inl)
    r_all = d[finite] + dz
    rmse_all = float(np.sqrt(np.mean(r_all * r_all))) if finite.any() else math.inf
    return AlignmentResult(
        shift=(u * cell, v * cell, dz),
        rmse_inliers=rmse_inl,
        rmse_all=rmse_all,
        n_inliers=int(np.count_nonzero(inl)),
        n_total=int(np.count_nonzero(finite)),
        converged=converged,
    )
