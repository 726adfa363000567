"""Floquet states of a periodically driven 1D surrogate system.

Units are dimensionless (hbar = 1, mass = 1).  The Hamiltonian is

    H(t) = p^2/2 + V(x) + (F cos(omega t) + F_st) x - i W(x)

where ``W`` is an optional polynomial absorber on the outer edges of the grid.
Time evolution uses a fourth-order composition of Strang split-operator steps
with the kinetic factor applied in momentum space.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import fft as sfft

# Yoshida weights for the symmetric fourth-order composition.
_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_W0 = 1.0 - 2.0 * _W1
_YOSHIDA = (_W1, _W0, _W1)

# Below this decay rate an eigenvalue modulus is indistinguishable from 1.
GAMMA_FLOOR = 1e-10


class PropagationError(RuntimeError):
    """Non-finite amplitudes during time stepping (step size too large)."""


class GridTooSmallError(ValueError):
    """A kept state leaks onto the edge of a grid without absorber."""


class BrokenPropagatorError(RuntimeError):
    """An eigenvalue modulus exceeds 1: the propagator amplifies."""


class PotentialKind(str, enum.Enum):
    QUARTIC = "QuarticOscillator"
    SOFT_COULOMB = "SoftCoulomb"


class Phase(str, enum.Enum):
    """Drive phase at which a state is sampled; values are the manifest tokens."""

    T0 = "0"
    TQUARTER = "T4"
    THALF = "T2"

    @property
    def fraction(self) -> float:
        return {"0": 0.0, "T4": 0.25, "T2": 0.5}[self.value]

    @property
    def angle(self) -> float:
        """Drive phase omega*t in radians."""
        return 2.0 * math.pi * self.fraction


PHASES = (Phase.T0, Phase.TQUARTER, Phase.THALF)


@dataclass(frozen=True)
class PotentialSpec:
    kind: PotentialKind = PotentialKind.QUARTIC
    beta: float = 0.005
    a: float = 1.0
    cap_strength: float = 0.0
    cap_fraction: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PotentialKind(self.kind))
        # beta = 0 is allowed: it is the harmonic limit used for analytic checks.
        if self.kind is PotentialKind.QUARTIC and self.beta < 0:
            raise ValueError("beta must be >= 0 for QuarticOscillator")
        if self.kind is PotentialKind.SOFT_COULOMB and self.a <= 0:
            raise ValueError("softening length a must be > 0")
        if self.cap_strength < 0:
            raise ValueError("cap_strength must be >= 0")
        if not 0.0 <= self.cap_fraction < 0.5:
            raise ValueError("cap_fraction must lie in [0, 0.5)")

    @property
    def unitary(self) -> bool:
        return self.cap_strength == 0.0

    def value(self, x: np.ndarray) -> np.ndarray:
        """Field-free real potential."""
        x = np.asarray(x, dtype=float)
        if self.kind is PotentialKind.QUARTIC:
            return 0.5 * x**2 + self.beta * x**4
        return -1.0 / np.sqrt(x**2 + self.a**2)

    def force(self, x: np.ndarray) -> np.ndarray:
        """-dV/dx of the field-free potential."""
        x = np.asarray(x, dtype=float)
        if self.kind is PotentialKind.QUARTIC:
            return -(x + 4.0 * self.beta * x**3)
        return -x / (x**2 + self.a**2) ** 1.5

    def absorber(self, grid: GridSpec) -> np.ndarray:
        """Non-negative absorber profile W(x) on the grid (the CAP is -i W)."""
        x = grid.x
        W = np.zeros_like(x)
        if self.cap_strength == 0.0 or self.cap_fraction == 0.0:
            return W
        width = self.cap_fraction * (grid.x_max - grid.x_min)
        right = x > grid.x_max - width
        left = x < grid.x_min + width
        W[right] = ((x[right] - (grid.x_max - width)) / width) ** 4
        W[left] = (((grid.x_min + width) - x[left]) / width) ** 4
        return self.cap_strength * W


@dataclass(frozen=True)
class DriveParameters:
    F: float = 0.0
    F_st: float = 0.0
    omega: float = 1.0

    def __post_init__(self) -> None:
        if not self.omega > 0:
            raise ValueError("omega must be > 0")
        if self.F < 0 or self.F_st < 0:
            raise ValueError("F and F_st must be >= 0")

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.omega

    def field(self, t: float | np.ndarray) -> float | np.ndarray:
        return self.F * np.cos(self.omega * t) + self.F_st


@dataclass(frozen=True)
class GridSpec:
    n_points: int = 256
    x_min: float = -12.0
    x_max: float = 12.0
    n_time_steps: int = 2048

    def __post_init__(self) -> None:
        if self.n_points < 64 or self.n_points & (self.n_points - 1):
            raise ValueError("n_points must be a power of two >= 64")
        if not self.x_min < self.x_max:
            raise ValueError("x_min must be < x_max")
        if self.n_time_steps < 100:
            raise ValueError("n_time_steps must be >= 100")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_points

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_points)

    @property
    def p(self) -> np.ndarray:
        return 2.0 * np.pi * sfft.fftfreq(self.n_points, d=self.dx)

    def doubled(self) -> GridSpec:
        return replace(self, n_points=2 * self.n_points)


@dataclass(frozen=True, eq=False)
class FloquetState:
    amplitudes: np.ndarray
    quasienergy: float
    gamma: float
    phase_label: Phase = Phase.T0

    def __post_init__(self) -> None:
        object.__setattr__(self, "phase_label", Phase(self.phase_label))

    def norm(self, dx: float) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2) * dx))


class SplitOperator:
    """Fourth-order split-operator stepper for one (potential, drive, grid)."""

    def __init__(self, potential: PotentialSpec, drive: DriveParameters, grid: GridSpec):
        self.potential = potential
        self.drive = drive
        self.grid = grid
        self.x = grid.x
        self._half_kinetic_p2 = 0.5 * grid.p**2
        self._v0 = potential.value(self.x) - 1j * potential.absorber(grid)
        self._nominal_step = drive.period / grid.n_time_steps

    def _potential_phase(self, t_mid: float, h: float) -> np.ndarray:
        V = self._v0 + self.drive.field(t_mid) * self.x
        return -0.5j * h * V

    def evolve(self, psi: np.ndarray, t0: float, t1: float, n_steps: int | None = None) -> np.ndarray:
        """Propagate ``psi`` (last axis = position) from t0 to t1."""
        span = t1 - t0
        if span == 0.0:
            return np.array(psi, dtype=complex, copy=True)
        if n_steps is None:
            n_steps = max(1, math.ceil(abs(span) / self._nominal_step - 1e-9))
        h = span / n_steps
        kin = {w: np.exp(-1j * w * h * self._half_kinetic_p2) for w in set(_YOSHIDA)}
        out = np.array(psi, dtype=complex, copy=True)
        pending = None
        t = t0
        for _ in range(n_steps):
            for w in _YOSHIDA:
                hw = w * h
                half = self._potential_phase(t + 0.5 * hw, hw)
                phase = half if pending is None else half + pending
                out *= np.exp(phase)
                out = sfft.ifft(sfft.fft(out, axis=-1, overwrite_x=True) * kin[w],
                                axis=-1, overwrite_x=True)
                pending = half
                t += hw
        out *= np.exp(pending)
        if not np.all(np.isfinite(out)):
            raise PropagationError("non-finite amplitudes; increase n_time_steps")
        return out


def one_period_propagator(potential: PotentialSpec, drive: DriveParameters,
                          grid: GridSpec) -> np.ndarray:
    """Dense one-period evolution operator U(T).

    Column j is the image of the j-th position basis vector after one drive
    period.  Columns are propagated together as rows of one array.
    """
    if grid.n_time_steps % 2:
        raise ValueError("n_time_steps must be even")
    stepper = SplitOperator(potential, drive, grid)
    basis = np.eye(grid.n_points, dtype=complex)
    rows = stepper.evolve(basis, 0.0, drive.period, grid.n_time_steps)
    U = np.ascontiguousarray(rows.T)
    if not np.all(np.isfinite(U)):
        raise PropagationError("non-finite propagator entries; increase n_time_steps")
    return U


def unitarity_defect(U: np.ndarray) -> float:
    """Max deviation of a column norm from 1."""
    return float(np.max(np.abs(np.linalg.norm(U, axis=0) - 1.0)))


def fold_quasienergy(eps: np.ndarray | float, omega: float, snap: float = 1e-6):
    """Fold into [-omega/2, omega/2).

    Values within ``snap * omega`` below +omega/2 sit on the zone edge to
    within solver accuracy and are mapped onto the representative -omega/2.
    """
    eps = np.asarray(eps, dtype=float)
    folded = np.mod(eps + 0.5 * omega, omega) - 0.5 * omega
    near_top = folded >= 0.5 * omega - snap * omega
    folded = np.where(near_top, -0.5 * omega, folded)
    return folded if folded.ndim else float(folded)


def phase_space_size(psi: np.ndarray, grid: GridSpec) -> float:
    """<x^2> + <p^2> of a (not necessarily normalized) state."""
    w = np.abs(psi) ** 2
    norm = np.sum(w)
    x2 = np.sum(w * grid.x**2) / norm
    pw = np.abs(sfft.fft(psi)) ** 2
    p2 = np.sum(pw * grid.p**2) / np.sum(pw)
    return float(x2 + p2)


def floquet_states(U: np.ndarray, drive: DriveParameters, grid: GridSpec,
                   n_keep: int, *, check_edges: bool = True) -> list[FloquetState]:
    """Eigen-decompose U(T) into Floquet states sorted by decay rate.

    Decay rates below ``GAMMA_FLOOR`` are reported as exactly zero; states with
    equal decay rate are ordered by phase-space size <x^2> + <p^2>, so the
    most compact states come first.
    """
    n = U.shape[0]
    if not 1 <= n_keep <= n:
        raise ValueError("n_keep must lie in [1, n_points]")
    try:
        lam, vecs = np.linalg.eig(U)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise RuntimeError(f"eigensolver did not converge: {exc}") from exc
    mod = np.abs(lam)
    if np.any(mod > 1.0 + 1e-6):
        raise BrokenPropagatorError(f"eigenvalue modulus {mod.max():.3e} > 1")
    T = drive.period
    gamma = -(2.0 / T) * np.log(np.minimum(mod, 1.0))
    gamma[gamma < GAMMA_FLOOR] = 0.0
    eps = fold_quasienergy(-np.angle(lam) / T, drive.omega)
    sizes = np.array([phase_space_size(vecs[:, j], grid) for j in range(n)])
    order = np.lexsort((sizes, gamma))[:n_keep]

    dx = grid.dx
    edge = max(1, n // 20)
    out = []
    for j in order:
        v = vecs[:, j] / np.sqrt(np.sum(np.abs(vecs[:, j]) ** 2) * dx)
        if check_edges and gamma[j] == 0.0:
            leak = (np.sum(np.abs(v[:edge]) ** 2) + np.sum(np.abs(v[-edge:]) ** 2)) * dx
            if leak > 1e-6:
                raise GridTooSmallError(f"state mass {leak:.2e} at grid edge; widen the grid")
        out.append(FloquetState(v, float(eps[j]), float(gamma[j]), Phase.T0))
    return out


def evolve_to_phase(state: FloquetState, potential: PotentialSpec, drive: DriveParameters,
                    grid: GridSpec, target: Phase) -> FloquetState:
    if state.phase_label is not Phase.T0:
        raise ValueError("state must be at phase T0")
    target = Phase(target)
    if target is Phase.T0:
        return FloquetState(state.amplitudes.copy(), state.quasienergy, state.gamma, Phase.T0)
    t1 = target.fraction * drive.period
    n_steps = max(1, round(target.fraction * grid.n_time_steps))
    psi = SplitOperator(potential, drive, grid).evolve(state.amplitudes, 0.0, t1, n_steps)
    return FloquetState(psi, state.quasienergy, state.gamma, target)


def configuration_density(state: FloquetState, potential: PotentialSpec,
                          drive: DriveParameters, grid: GridSpec,
                          n_time_samples: int = 150) -> np.ndarray:
    """Space-time carpet |psi(x, t_k)|^2 over one drive period.

    Rows start at the drive phase recorded on ``state`` and are spaced by
    T / n_time_samples.
    """
    return carpets(state.amplitudes[None, :], state.phase_label, potential, drive, grid,
                   n_time_samples)[0]


def carpets(amplitudes: np.ndarray, start: Phase, potential: PotentialSpec,
            drive: DriveParameters, grid: GridSpec, n_time_samples: int = 150) -> np.ndarray:
    """Batched ``configuration_density`` for rows of ``amplitudes``; shape (k, n_t, n_x)."""
    stepper = SplitOperator(potential, drive, grid)
    T = drive.period
    t = Phase(start).fraction * T
    dt = T / n_time_samples
    sub = max(1, math.ceil(grid.n_time_steps / n_time_samples))
    psi = np.array(amplitudes, dtype=complex)
    out = np.empty((psi.shape[0], n_time_samples, grid.n_points))
    for k in range(n_time_samples):
        out[:, k] = np.abs(psi) ** 2
        if k + 1 < n_time_samples:
            psi = stepper.evolve(psi, t, t + dt, sub)
            t += dt
    return out


def convergence_check(potential: PotentialSpec, drive: DriveParameters, grid: GridSpec,
                      n_keep: int) -> float:
    """Largest change of a kept quasienergy when n_points is doubled.

    States are matched by phase-space overlap on the common coarse points.
    """
    coarse = floquet_states(one_period_propagator(potential, drive, grid), drive, grid, n_keep)
    fine_grid = grid.doubled()
    fine = floquet_states(one_period_propagator(potential, drive, fine_grid), drive, fine_grid,
                          min(fine_grid.n_points, 4 * n_keep))
    worst = 0.0
    for s in coarse:
        best = max(fine, key=lambda f: abs(np.vdot(f.amplitudes[::2], s.amplitudes)))
        d = abs(best.quasienergy - s.quasienergy)
        worst = max(worst, min(d, drive.omega - d))
    return worst
