"""Classical stroboscopic dynamics of the driven surrogate.

Orbits are integrated with a fourth-order symplectic (Forest-Ruth / Yoshida)
scheme in extended phase space: drifts advance x and t, kicks evaluate the
time-dependent force at the current t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .floquet import PHASES, DriveParameters, Phase, PotentialSpec

_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_W0 = 1.0 - 2.0 * _W1
_DRIFT = (0.5 * _W1, 0.5 * (_W1 + _W0), 0.5 * (_W1 + _W0), 0.5 * _W1)
_KICK = (_W1, _W0, _W1)


@dataclass
class PoincareSection:
    points: np.ndarray                 # (N, 2) array of (x, p)
    drive_phase: float
    orbit_index: np.ndarray            # orbit id of each point
    escaped: np.ndarray                # per-orbit flag
    window: float

    def orbit(self, i: int) -> np.ndarray:
        return self.points[self.orbit_index == i]


@dataclass
class Island:
    """Resonance island sampled at the three drive phases."""

    centers: dict[Phase, tuple[float, float]]
    points: dict[Phase, np.ndarray]
    boxes: dict[Phase, tuple[float, float, float, float]]   # padded (x_lo, x_hi, p_lo, p_hi)
    n_orbits: int
    kind: str = "resonance"
    trace: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "n_orbits": self.n_orbits,
            "trace": self.trace,
            "centers": {ph.value: list(c) for ph, c in self.centers.items()},
            "boxes": {ph.value: list(b) for ph, b in self.boxes.items()},
        }


def _force(potential: PotentialSpec, drive: DriveParameters, x, t):
    return potential.force(x) - drive.field(t)


def flow(potential: PotentialSpec, drive: DriveParameters, x, p, t0: float, t1: float,
         n_steps: int):
    """Integrate Hamilton's equations from t0 to t1 in ``n_steps`` equal steps."""
    x = np.array(x, dtype=float, copy=True)
    p = np.array(p, dtype=float, copy=True)
    if n_steps <= 0 or t1 == t0:
        return x, p
    h = (t1 - t0) / n_steps
    t = t0
    for _ in range(n_steps):
        for i in range(3):
            x += _DRIFT[i] * h * p
            t += _DRIFT[i] * h
            p += _KICK[i] * h * _force(potential, drive, x, t)
        x += _DRIFT[3] * h * p
        t += _DRIFT[3] * h
    return x, p


def classical_poincare_section(potential: PotentialSpec, drive: DriveParameters,
                               initial_conditions, n_periods: int, drive_phase: float,
                               n_time_steps: int = 256, window: float = 8.0) -> PoincareSection:
    """Stroboscopic section at a fixed drive phase.

    Initial conditions are placed at t0 = drive_phase / omega; the initial
    point and the next ``n_periods - 1`` returns are recorded.  Orbits leaving
    the square window |x|, |p| <= window are truncated and flagged.
    """
    if n_periods < 1:
        raise ValueError("n_periods must be >= 1")
    ic = np.atleast_2d(np.asarray(initial_conditions, dtype=float))
    x, p = ic[:, 0].copy(), ic[:, 1].copy()
    T = drive.period
    t = (drive_phase % (2 * math.pi)) / drive.omega
    alive = np.ones(len(x), dtype=bool)
    pts, ids = [], []
    for k in range(n_periods):
        inside = (np.abs(x) <= window) & (np.abs(p) <= window) & np.isfinite(x) & np.isfinite(p)
        alive &= inside
        idx = np.nonzero(alive)[0]
        pts.append(np.column_stack([x[idx], p[idx]]))
        ids.append(idx)
        if k + 1 < n_periods:
            x, p = flow(potential, drive, x, p, t, t + T, n_time_steps)
            t += T
    return PoincareSection(np.concatenate(pts), drive_phase % (2 * math.pi),
                           np.concatenate(ids), ~alive, window)


def classical_frequency(potential: PotentialSpec, amplitude: float, n_steps: int = 4000) -> float:
    """Angular frequency of the undriven orbit with turning point x = amplitude."""
    V = potential.value
    E = float(V(amplitude))
    # Quarter period by the action integral, substitution x = A sin(u) removes the
    # turning-point singularity.
    u = (np.arange(n_steps) + 0.5) * (0.5 * math.pi / n_steps)
    xs = amplitude * np.sin(u)
    kin = 2.0 * (E - V(xs))
    kin = np.maximum(kin, 1e-300)
    quarter = np.sum(amplitude * np.cos(u) / np.sqrt(kin)) * (0.5 * math.pi / n_steps)
    return 2.0 * math.pi / (4.0 * quarter)


def resonant_amplitude(potential: PotentialSpec, omega: float, a_max: float = 12.0) -> float | None:
    """Amplitude whose undriven frequency equals ``omega``, or None."""
    f = lambda a: classical_frequency(potential, a) - omega
    lo, hi = 1e-3, a_max
    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        return None
    return brentq(f, lo, hi, xtol=1e-12)


def locate_resonance(potential: PotentialSpec, target_amplitude: float) -> float:
    """Drive frequency that places the 1:1 island at ``target_amplitude``."""
    return classical_frequency(potential, target_amplitude)


def _strobe_map(potential, drive, z, n_steps):
    x, p = flow(potential, drive, z[..., 0], z[..., 1], 0.0, drive.period, n_steps)
    return np.stack([x, p], axis=-1)


def find_fixed_point(potential: PotentialSpec, drive: DriveParameters, seed,
                     n_steps: int = 256, tol: float = 1e-10, max_iter: int = 40):
    """Newton iteration for a fixed point of the phase-0 stroboscopic map.

    Returns (point, monodromy trace) or None when Newton fails.
    """
    z = np.asarray(seed, dtype=float)
    e = 1e-6
    for _ in range(max_iter):
        probes = np.array([z, z + [e, 0], z - [e, 0], z + [0, e], z - [0, e]])
        img = _strobe_map(potential, drive, probes, n_steps)
        if not np.all(np.isfinite(img)):
            return None
        f = img[0] - z
        M = np.column_stack([(img[1] - img[2]) / (2 * e), (img[3] - img[4]) / (2 * e)])
        if np.max(np.abs(f)) < tol:
            return z, float(np.trace(M))
        try:
            z = z - np.linalg.solve(M - np.eye(2), f)
        except np.linalg.LinAlgError:
            return None
        if np.max(np.abs(z)) > 1e3:
            return None
    return None


def equilibrium(potential: PotentialSpec, F_st: float) -> float:
    """Stable equilibrium of V(x) + F_st x."""
    g = lambda x: -potential.force(x) + F_st
    return brentq(g, -50.0, 50.0, xtol=1e-14)


def _sample_phases(potential, drive, x0, p0, n_periods, n_steps, window):
    """Integrate from phase 0 and sample at the three standard phases each period."""
    T = drive.period
    quarter = n_steps // 4
    x, p = x0.copy(), p0.copy()
    out = {ph: [] for ph in PHASES}
    alive = np.ones(len(x), dtype=bool)
    t = 0.0
    for _ in range(n_periods):
        for ph, nxt in ((Phase.T0, quarter), (Phase.TQUARTER, quarter), (Phase.THALF, n_steps - 2 * quarter)):
            alive &= (np.abs(x) <= window) & (np.abs(p) <= window) & np.isfinite(x) & np.isfinite(p)
            out[ph].append(np.column_stack([x, p]))
            dt = T * nxt / n_steps
            x, p = flow(potential, drive, x, p, t, t + dt, nxt)
            t += dt
    return {ph: np.stack(v) for ph, v in out.items()}, alive


def _encircles_origin(orbit: np.ndarray, center) -> bool:
    ref = math.atan2(center[1], center[0])
    ang = np.angle(np.exp(1j * (np.arctan2(orbit[:, 1], orbit[:, 0]) - ref)))
    return bool(np.any(np.abs(ang) >= 0.5 * math.pi))


def find_island(potential: PotentialSpec, drive: DriveParameters, window: float = 8.0,
                diameter_fraction: float = 0.3, pad: float = 0.2, n_seeds: int = 40,
                max_offset: float = 3.0, n_periods: int = 40, n_steps: int = 256) -> Island | None:
    """Locate the stable island that hosts localized Floquet states.

    For F > 0 this is the 1:1 resonance island: Newton from the resonant
    amplitude on both sides of the origin, keeping an elliptic fixed point.
    For F = 0 the island is the neighbourhood of the static equilibrium.
    Island orbits are seeded outward from the center and accepted while they
    stay below ``diameter_fraction`` of the window width and (resonance case)
    neither wind around the origin nor approach it closer than half the
    center's radius.  Boxes are padded by ``pad`` per side.
    """
    if drive.F == 0.0:
        x_eq = equilibrium(potential, drive.F_st)
        center0, trace, kind = np.array([x_eq, 0.0]), 2.0, "equilibrium"
    else:
        amp = resonant_amplitude(potential, drive.omega)
        if amp is None:
            return None
        best = None
        for sign in (-1.0, 1.0):
            res = find_fixed_point(potential, drive, [sign * amp, 0.0], n_steps)
            if res is None:
                continue
            z, tr = res
            if abs(tr) < 2.0 and np.hypot(*z) > 0.5 * amp:
                best = (z, tr)
                break
        if best is None:
            return None
        center0, trace = best
        kind = "resonance"

    offs = np.linspace(max_offset / n_seeds, max_offset, n_seeds)
    direction = center0 / np.hypot(*center0) if np.hypot(*center0) > 1e-9 else np.array([1.0, 0.0])
    seeds = np.concatenate([center0 + offs[:, None] * direction,
                            center0 - offs[:, None] * direction,
                            center0[None, :]])
    samples, alive = _sample_phases(potential, drive, seeds[:, 0], seeds[:, 1],
                                    n_periods, n_steps, window)
    dmax = diameter_fraction * 2.0 * window
    good = alive.copy()
    for ph in PHASES:
        orb = samples[ph]                      # (n_periods, n_orbits, 2)
        diam = np.maximum(np.ptp(orb[..., 0], axis=0), np.ptp(orb[..., 1], axis=0))
        good &= diam < dmax
        if kind == "resonance":
            c = orb[0, -1]
            good &= np.array([not _encircles_origin(orb[:, i], c) for i in range(orb.shape[1])])
            # Orbits around the inner, non-resonant fixed point are not part of the island.
            good &= np.hypot(orb[..., 0], orb[..., 1]).min(axis=0) > 0.5 * np.hypot(*c)
    keep = np.zeros_like(good)
    keep[-1] = good[-1]
    for half in (slice(0, n_seeds), slice(n_seeds, 2 * n_seeds)):
        g = good[half]
        stop = len(g) if g.all() else int(np.argmin(g))
        keep[np.arange(len(good))[half][:stop]] = True
    if not keep[-1] or keep.sum() < 3:
        return None

    centers, points, boxes = {}, {}, {}
    for ph in PHASES:
        orb = samples[ph][:, keep]
        pts = orb.reshape(-1, 2)
        centers[ph] = (float(orb[0, -1, 0]), float(orb[0, -1, 1]))
        points[ph] = pts
        x_lo, x_hi = pts[:, 0].min(), pts[:, 0].max()
        p_lo, p_hi = pts[:, 1].min(), pts[:, 1].max()
        wx, wp = x_hi - x_lo, p_hi - p_lo
        boxes[ph] = (float(x_lo - pad * wx), float(x_hi + pad * wx),
                     float(p_lo - pad * wp), float(p_hi + pad * wp))
    return Island(centers, points, boxes, int(keep.sum()), kind, trace)
