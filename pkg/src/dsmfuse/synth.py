"""Deterministic synthetic scenes for exercising fusion and registration.

A scene is a flat ground plane with rectangular building prisms stamped on
it, returned as a truth DSM plus the matching intensity orthophoto.
``degrade`` then simulates per-pair matching artifacts: Gaussian height
noise, salt-and-pepper spikes, and nodata holes.

All randomness flows through numpy SeedSequence spawning with one child
stream per purpose (noise, spikes, holes), so outputs are bit-reproducible
across runs and worker counts, and the streams stay aligned when a rate is
zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import GridGeometry, RasterGrid


@dataclass(frozen=True)
class Building:
    """Axis-aligned footprint in cell coordinates; rows count from the top."""

    col: int
    row: int
    n_cols: int
    n_rows: int
    height: float
    intensity: float


@dataclass
class SceneSpec:
    """Scene layout.  Generation is purely geometric; the seed is carried
    so that derived products (degraded layers) can key off it."""

    seed: int
    width: int
    height: int
    cell_size: float = 1.0
    ground_height: float = 0.0
    ground_intensity: float = 60.0
    buildings: tuple[Building, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("scene must be at least 1x1 cells")
        for b in self.buildings:
            if b.height < 0:
                raise ValueError(f"building height must be >= 0, got {b.height}")
            if (
                b.col < 0
                or b.row < 0
                or b.col + b.n_cols > self.width
                or b.row + b.n_rows > self.height
            ):
                raise ValueError(f"building footprint {b} outside the scene")


@dataclass(frozen=True)
class DegradeSpec:
    seed: int
    gaussian_sigma: float = 0.0
    spike_prob: float = 0.0
    spike_amp: float = 0.0
    hole_prob: float = 0.0

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        for name in ("spike_prob", "hole_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


def gen_scene(spec: SceneSpec) -> tuple[RasterGrid, RasterGrid]:
    """Truth DSM and orthophoto for a scene.

    Building prisms sit on the ground plane; where footprints overlap the
    later building in the list wins.
    """
    geom = GridGeometry(0.0, 0.0, spec.cell_size, spec.width, spec.height)
    dsm = np.full((spec.height, spec.width), spec.ground_height, dtype=np.float64)
    ortho = np.full((spec.height, spec.width), spec.ground_intensity, dtype=np.float64)
    for b in spec.buildings:
        rows = slice(b.row, b.row + b.n_rows)
        cols = slice(b.col, b.col + b.n_cols)
        dsm[rows, cols] = spec.ground_height + b.height
        ortho[rows, cols] = b.intensity
    return RasterGrid(geom, dsm), RasterGrid(geom, ortho)


def degrade(truth: RasterGrid, spec: DegradeSpec) -> RasterGrid:
    """Noisy copy of a truth grid: Gaussian noise on valid cells, then a
    spike_prob fraction bumped by +-spike_amp (sign seeded), then a
    hole_prob fraction knocked out to nodata."""
    noise_rng, spike_rng, hole_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3)
    )
    shape = truth.values.shape
    valid = truth.valid_mask()
    out = truth.values.copy()

    if spec.gaussian_sigma > 0:
        noise = noise_rng.normal(0.0, spec.gaussian_sigma, size=shape)
        out[valid] += noise[valid]

    if spec.spike_prob > 0:
        hit = spike_rng.random(size=shape) < spec.spike_prob
        sign = np.where(spike_rng.random(size=shape) < 0.5, -1.0, 1.0)
        sel = hit & valid
        out[sel] += sign[sel] * spec.spike_amp

    if spec.hole_prob > 0:
        holes = hole_rng.random(size=shape) < spec.hole_prob
        out[holes & valid] = truth.nodata

    out[~valid] = truth.nodata
    return RasterGrid(truth.geometry, out, truth.nodata)
