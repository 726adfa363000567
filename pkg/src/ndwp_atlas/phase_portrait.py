"""Husimi distributions and fixed-size RGB renderings of states."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .floquet import (DriveParameters, FloquetState, GridSpec, PotentialSpec,
                      configuration_density)

IMAGE_SIZE = 150

COLORMAP_POSITIONS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
COLORMAP_ANCHORS = np.array([
    (13, 8, 135),
    (126, 3, 168),
    (204, 71, 120),
    (248, 149, 64),
    (240, 249, 33),
], dtype=float)
BACKGROUND = tuple(int(c) for c in COLORMAP_ANCHORS[0])


class Space(str, enum.Enum):
    CS = "CS"
    PS = "PS"


@dataclass(frozen=True)
class HusimiGrid:
    x_range: tuple[float, float] = (-10.0, 10.0)
    p_range: tuple[float, float] = (-10.0, 10.0)
    resolution: tuple[int, int] = (IMAGE_SIZE, IMAGE_SIZE)   # (n_x, n_p)
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if min(self.resolution) < 16:
            raise ValueError("Husimi resolution must be >= 16 per axis")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(*self.x_range, self.resolution[0])

    @property
    def ps(self) -> np.ndarray:
        return np.linspace(*self.p_range, self.resolution[1])

    @property
    def cell_area(self) -> float:
        (x0, x1), (p0, p1) = self.x_range, self.p_range
        return (x1 - x0) / (self.resolution[0] - 1) * (p1 - p0) / (self.resolution[1] - 1)


@dataclass(eq=False)
class ScalarField:
    values: np.ndarray                       # (n_p, n_x) for PS, (n_t, n_x) for CS
    extent: tuple[float, float, float, float]
    flags: list[str] = field(default_factory=list)


@dataclass(eq=False)
class StateImage:
    pixels: np.ndarray                       # uint8, (3, 150, 150) channel-first
    space: Space
    key: object = None

    def __post_init__(self) -> None:
        if self.pixels.shape != (3, IMAGE_SIZE, IMAGE_SIZE) or self.pixels.dtype != np.uint8:
            raise ValueError(f"image must be uint8 3x{IMAGE_SIZE}x{IMAGE_SIZE}")
        self.space = Space(self.space)


def coherent_state(x: np.ndarray, x0: float, p0: float, sigma: float = 1.0) -> np.ndarray:
    return ((math.pi * sigma**2) ** -0.25
            * np.exp(-((x - x0) ** 2) / (2 * sigma**2) + 1j * p0 * x))


def husimi_values(psi: np.ndarray, grid: GridSpec, hgrid: HusimiGrid) -> np.ndarray:
    """(1/pi) |<x_i, p_j | psi>|^2 on the Husimi lattice, shape (n_p, n_x)."""
    x = grid.x
    xs, ps = hgrid.xs, hgrid.ps
    env = (math.pi * hgrid.sigma**2) ** -0.25 * np.exp(
        -((x[None, :] - xs[:, None]) ** 2) / (2 * hgrid.sigma**2))
    weighted = env * psi[None, :]                       # (n_x, n_grid)
    # Trapezoid weights; the periodic grid makes them uniform.
    plane = np.exp(-1j * np.outer(ps, x))               # (n_p, n_grid)
    overlap = plane @ weighted.T * grid.dx
    return np.abs(overlap) ** 2 / math.pi


def husimi_field(state: FloquetState, grid: GridSpec, hgrid: HusimiGrid) -> ScalarField:
    values = husimi_values(state.amplitudes, grid, hgrid)
    f = ScalarField(values, (*hgrid.x_range, *hgrid.p_range))
    outside = 1.0 - husimi_mass(f, hgrid)
    if outside > 0.05:
        f.flags.append(f"mass outside Husimi window {outside:.3f} > 0.05")
    return f


def husimi_mass(f: ScalarField, hgrid: HusimiGrid) -> float:
    """Integral of Q over the window with the coherent-state measure dx dp / 2.

    With Q = (1/pi)|<x,p|psi>|^2 this is the d^2(alpha) measure,
    alpha = (x + i p)/sqrt(2), under which a normalized state has unit mass.
    """
    w_x = np.ones(hgrid.resolution[0])
    w_x[[0, -1]] = 0.5
    w_p = np.ones(hgrid.resolution[1])
    w_p[[0, -1]] = 0.5
    return float(w_p @ f.values @ w_x * hgrid.cell_area / 2.0)


def box_mass_fraction(values: np.ndarray, xs: np.ndarray, ps: np.ndarray, box) -> float:
    """Fraction of field mass inside (x_lo, x_hi, p_lo, p_hi)."""
    x_lo, x_hi, p_lo, p_hi = box
    inside = ((ps[:, None] >= p_lo) & (ps[:, None] <= p_hi)
              & (xs[None, :] >= x_lo) & (xs[None, :] <= x_hi))
    total = values.sum()
    if total <= 0:
        return 0.0
    return float(min(1.0, max(0.0, values[inside].sum() / total)))


def apply_colormap(field: ScalarField | np.ndarray, normalize: str | float = "PerImageMax") -> np.ndarray:
    """Map a non-negative field onto the 5-anchor colormap.

    ``normalize`` is ``"PerImageMax"`` or a positive number used as a fixed
    maximum.  Returns uint8 (3, H, W); rows of the field become image rows.
    """
    values = np.asarray(getattr(field, "values", field), dtype=float)
    if normalize == "PerImageMax":
        vmax = values.max()
    else:
        vmax = float(normalize)
    scaled = values / vmax if vmax > 0 else np.zeros_like(values)
    scaled = np.clip(scaled, 0.0, 1.0)
    rgb = np.stack([np.interp(scaled, COLORMAP_POSITIONS, COLORMAP_ANCHORS[:, c])
                    for c in range(3)])
    return np.rint(rgb).astype(np.uint8)


def resample_rows(carpet: np.ndarray, x: np.ndarray, x_range, n_out: int = IMAGE_SIZE) -> np.ndarray:
    """Linear resampling of each carpet row onto ``n_out`` points over ``x_range``."""
    xo = np.linspace(*x_range, n_out)
    return np.stack([np.interp(xo, x, row, left=0.0, right=0.0) for row in carpet])


def render_state(state: FloquetState, space: Space | str, hgrid: HusimiGrid, key=None, *,
                 potential: PotentialSpec | None = None, drive: DriveParameters | None = None,
                 grid: GridSpec | None = None, normalize="PerImageMax",
                 field: ScalarField | None = None) -> StateImage:
    """Render a state as a 3x150x150 image.

    PS: Husimi field with p increasing upward.  CS: configuration density
    carpet over one period (time downward) resampled to 150x150 over the
    Husimi x-range.  A precomputed ``field`` may be passed to skip recomputation.
    """
    space = Space(space)
    if grid is None:
        raise ValueError("grid is required")
    if space is Space.PS:
        if field is None:
            field = husimi_field(state, grid, hgrid)
        values = field.values[::-1]
        if values.shape != (IMAGE_SIZE, IMAGE_SIZE):
            values = _resize(values)
    else:
        if field is None:
            if potential is None or drive is None:
                raise ValueError("potential and drive are required for CS rendering")
            carpet = configuration_density(state, potential, drive, grid, IMAGE_SIZE)
            field = ScalarField(carpet, (grid.x_min, grid.x_max, 0.0, drive.period))
        values = resample_rows(field.values, grid.x, hgrid.x_range)
        if values.shape[0] != IMAGE_SIZE:
            values = _resize(values)
    return StateImage(apply_colormap(values, normalize), space, key)


def _resize(values: np.ndarray) -> np.ndarray:
    from scipy.ndimage import zoom
    zy = IMAGE_SIZE / values.shape[0]
    zx = IMAGE_SIZE / values.shape[1]
    out = zoom(values, (zy, zx), order=1)
    return np.clip(out[:IMAGE_SIZE, :IMAGE_SIZE], 0.0, None)


def pixel_to_phase_space(row: np.ndarray, col: np.ndarray, hgrid: HusimiGrid):
    """(x, p) at PS image pixels; row 0 is the top (largest p)."""
    xs, ps = hgrid.xs, hgrid.ps[::-1]
    return xs[col], ps[row]


def write_png(pixels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.ascontiguousarray(np.moveaxis(pixels, 0, -1))).save(path, format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(np.moveaxis(arr, -1, 0))
