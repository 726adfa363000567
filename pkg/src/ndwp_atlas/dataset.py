"""Parameter sweep, image dataset generation, manifest IO and augmentation."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import affine_transform

from .classical import find_island, locate_resonance
from .config import PipelineConfig
from .floquet import (PHASES, DriveParameters, GridSpec, Phase, PotentialSpec, SplitOperator,
                      carpets, floquet_states, one_period_propagator)
from .phase_portrait import (BACKGROUND, IMAGE_SIZE, HusimiGrid, Space, StateImage,
                             apply_colormap, box_mass_fraction, husimi_values, read_png,
                             resample_rows, write_png)

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("id,space,t_phase,L_min,L_max,k_min,k_max,omega,F,F_st,"
                   "Re_E,Im_E,image_path,config_hash")
MANIFEST_FIELDS = MANIFEST_HEADER.split(",")
ISLAND_MASS_HEADER = ["state_uid", "t_phase", "island_mass", "x_lo", "x_hi", "p_lo", "p_hi"]
LUMA = np.array([0.299, 0.587, 0.114])


class ManifestError(ValueError):
    pass


def fmt_float(x: float) -> str:
    """Shortest round-tripping scientific notation."""
    if math.isnan(x):
        return "nan"
    return np.format_float_scientific(x, unique=True, trim="-")


def state_uid(point: int, state: int) -> str:
    return f"{point:03d}-{state:02d}"


def row_id(point: int, state: int, phase: Phase, space: Space) -> str:
    return f"{state_uid(point, state)}-{Phase(phase).value}-{Space(space).value}"


@dataclass(frozen=True)
class ParameterKey:
    id: str
    space: Space
    t_phase: Phase
    omega: float
    F: float
    F_st: float
    Re_E: float
    Im_E: float
    L_min: int = 0
    L_max: int = 0
    k_min: int = 0
    k_max: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "space", Space(self.space))
        object.__setattr__(self, "t_phase", Phase(self.t_phase))
        if not self.omega > 0:
            raise ValueError(f"{self.id}: omega must be > 0")
        if self.Im_E > 0:
            raise ValueError(f"{self.id}: Im_E must be <= 0")

    @property
    def state_uid(self) -> str:
        """Identifier shared by all images of the same Floquet state."""
        return self.id.rsplit("-", 2)[0]


@dataclass(frozen=True)
class ManifestRow:
    key: ParameterKey
    image_path: str            # relative to the manifest; "" marks a failed row
    config_hash: str

    @property
    def failed(self) -> bool:
        return self.image_path == ""


@dataclass
class DatasetManifest:
    rows: list[ManifestRow] = field(default_factory=list)
    root: Path | None = None    # directory that image paths are relative to

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return _serialize(self) == _serialize(other)

    @property
    def ok_rows(self) -> list[ManifestRow]:
        return [r for r in self.rows if not r.failed]

    def image_file(self, row: ManifestRow) -> Path:
        return (self.root or Path(".")) / row.image_path

    def by_id(self) -> dict[str, ManifestRow]:
        return {r.key.id: r for r in self.rows}

    def validate(self, check_images: bool = True) -> list[str]:
        problems = []
        seen = set()
        for r in self.rows:
            if r.key.id in seen:
                problems.append(f"duplicate id {r.key.id}")
            seen.add(r.key.id)
            if check_images and not r.failed:
                path = self.image_file(r)
                if not path.exists():
                    problems.append(f"{r.key.id}: missing image {path}")
                    continue
                try:
                    px = read_png(path)
                except OSError as exc:
                    problems.append(f"{r.key.id}: undecodable image ({exc})")
                    continue
                if px.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
                    problems.append(f"{r.key.id}: image shape {px.shape}")
        return problems


# ---------------------------------------------------------------- manifest IO

def _serialize(m: DatasetManifest) -> str:
    buf = io.StringIO()
    buf.write(MANIFEST_HEADER + "\n")
    for r in m.rows:
        k = r.key
        vals = [k.id, k.space.value, k.t_phase.value, str(k.L_min), str(k.L_max),
                str(k.k_min), str(k.k_max), fmt_float(k.omega), fmt_float(k.F),
                fmt_float(k.F_st), fmt_float(k.Re_E), fmt_float(k.Im_E), r.image_path,
                r.config_hash]
        buf.write(",".join(vals) + "\n")
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    text = _serialize(manifest)
    if path.exists() and path.read_text() == text:
        return
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ManifestError(f"{path}:1: header must be exactly {MANIFEST_HEADER!r}")
    rows = []
    for lineno, rec in enumerate(csv.reader(lines[1:]), start=2):
        if len(rec) != len(MANIFEST_FIELDS):
            raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_FIELDS)} fields, "
                                f"got {len(rec)}")
        d = dict(zip(MANIFEST_FIELDS, rec))
        try:
            key = ParameterKey(
                id=d["id"], space=Space(d["space"]), t_phase=Phase(d["t_phase"]),
                omega=float(d["omega"]), F=float(d["F"]), F_st=float(d["F_st"]),
                Re_E=float(d["Re_E"]), Im_E=float(d["Im_E"]),
                L_min=int(d["L_min"]), L_max=int(d["L_max"]),
                k_min=int(d["k_min"]), k_max=int(d["k_max"]))
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        rows.append(ManifestRow(key, d["image_path"], d["config_hash"]))
    m = DatasetManifest(rows, path.parent)
    ids = [r.key.id for r in rows]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise ManifestError(f"{path}: duplicate id {dup}")
    return m


# ---------------------------------------------------------------- sweep planning

@dataclass(frozen=True)
class GenerationSettings:
    potential: PotentialSpec
    grid: GridSpec
    hgrid: HusimiGrid
    window: float = 8.0
    diameter_fraction: float = 0.3
    island_pad: float = 0.2
    n_periods: int = 40
    classical_steps: int = 256
    config_hash: str = ""


@dataclass
class SweepPlan:
    omega_values: list[float]
    F_values: list[float]
    F_st_values: list[float]
    n_states_per_point: int
    phases: list[Phase]
    spaces: list[Space]
    settings: GenerationSettings | None = None
    omega_res: float | None = None

    def __post_init__(self) -> None:
        self.phases = [Phase(p) for p in self.phases]
        self.spaces = [Space(s) for s in self.spaces]
        if not (self.omega_values and self.F_values and self.F_st_values
                and self.phases and self.spaces):
            raise ValueError("empty sweep grid")
        if self.n_states_per_point < 1:
            raise ValueError("n_states_per_point must be >= 1")

    def points(self) -> list[DriveParameters]:
        return [DriveParameters(F=F, F_st=Fs, omega=w) for w, F, Fs in
                itertools.product(self.omega_values, self.F_values, self.F_st_values)]

    @property
    def n_points(self) -> int:
        return len(self.omega_values) * len(self.F_values) * len(self.F_st_values)

    @property
    def total(self) -> int:
        return self.n_points * self.n_states_per_point * len(self.phases) * len(self.spaces)


def potential_from_config(cfg: PipelineConfig) -> PotentialSpec:
    p = cfg.potential
    return PotentialSpec(p.kind, p.beta, p.a, p.cap_strength, p.cap_fraction)


def grid_from_config(cfg: PipelineConfig) -> GridSpec:
    g = cfg.grid
    return GridSpec(g.n_points, g.x_min, g.x_max, g.n_time_steps)


def husimi_grid_from_config(cfg: PipelineConfig) -> HusimiGrid:
    half = cfg.resonance.window * (1.0 + cfg.husimi.pad)
    return HusimiGrid((-half, half), (-half, half), tuple(cfg.husimi.resolution), cfg.husimi.sigma)


def stepped_values(first: float, last: float, step: float) -> list[float]:
    """Inclusive arithmetic progression, robust to round-off in (last - first) / step."""
    n = int(math.floor((last - first) / step + 1e-9)) + 1
    return [float(v) for v in np.round(first + step * np.arange(n), 15)]


def plan_sweep(cfg: PipelineConfig) -> SweepPlan:
    sw = cfg.sweep
    potential = potential_from_config(cfg)
    omega_res = None
    if sw.omega_values:
        omegas = list(map(float, sw.omega_values))
    elif sw.omega_range:
        omegas = stepped_values(*map(float, sw.omega_range))
    else:
        omega_res = locate_resonance(potential, cfg.resonance.target_amplitude)
        omegas = [m * omega_res for m in sw.omega_multipliers]
    if any(w <= 0 for w in omegas):
        raise ValueError("omega values must be > 0")
    r = cfg.resonance
    settings = GenerationSettings(potential, grid_from_config(cfg), husimi_grid_from_config(cfg),
                                  r.window, r.island_diameter_fraction, r.island_pad,
                                  r.n_periods, r.n_time_steps, cfg.digest("generate"))
    return SweepPlan(omegas, list(map(float, sw.F_values)), list(map(float, sw.F_st_values)),
                     sw.n_states_per_point, sw.phases, sw.spaces, settings, omega_res)


# ---------------------------------------------------------------- generation

@dataclass
class PointResult:
    point: int
    rows: list[ManifestRow]
    masses: list[list]
    island: dict | None
    failure: str | None = None


def _point_rows(plan: SweepPlan, point: int, drive: DriveParameters, energies, h: str,
                failed: bool = False) -> list[ManifestRow]:
    rows = []
    for j in range(plan.n_states_per_point):
        re_e, im_e = energies[j] if energies is not None else (math.nan, math.nan)
        for ph in plan.phases:
            for sp in plan.spaces:
                rid = row_id(point, j, ph, sp)
                key = ParameterKey(rid, sp, ph, drive.omega, drive.F, drive.F_st, re_e, im_e)
                rows.append(ManifestRow(key, "" if failed else f"images/{rid}.png", h))
    return rows


def generate_point(plan: SweepPlan, point: int, drive: DriveParameters, out_dir: Path) -> PointResult:
    """Compute, render and write every image of one grid point."""
    s = plan.settings
    h = s.config_hash
    try:
        U = one_period_propagator(s.potential, drive, s.grid)
        states = floquet_states(U, drive, s.grid, plan.n_states_per_point)
    except Exception as exc:   # recorded per row, the sweep continues
        reason = f"{type(exc).__name__}: {exc}"
        return PointResult(point, _point_rows(plan, point, drive, None, h, failed=True), [], None,
                           reason)
    energies = [(st.quasienergy, -0.5 * st.gamma + 0.0) for st in states]
    island = find_island(s.potential, drive, s.window, s.diameter_fraction, s.island_pad,
                         n_periods=s.n_periods, n_steps=s.classical_steps)
    stepper = SplitOperator(s.potential, drive, s.grid)
    amps = np.stack([st.amplitudes for st in states])
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    xs, ps = s.hgrid.xs, s.hgrid.ps
    masses = []
    t_prev, psi = 0.0, amps
    for ph in PHASES:        # evolve forward through the phases in order
        t = ph.fraction * drive.period
        if t > t_prev:
            n_steps = max(1, round((t - t_prev) / drive.period * s.grid.n_time_steps))
            psi = stepper.evolve(psi, t_prev, t, n_steps)
            t_prev = t
        if ph not in plan.phases:
            continue
        fields = [husimi_values(psi[j], s.grid, s.hgrid) for j in range(len(states))]
        for j, Q in enumerate(fields):
            uid = state_uid(point, j)
            if island is not None:
                box = island.boxes[ph]
                masses.append([uid, ph.value, box_mass_fraction(Q, xs, ps, box), *box])
            else:
                masses.append([uid, ph.value, math.nan, math.nan, math.nan, math.nan, math.nan])
        if Space.PS in plan.spaces:
            for j, Q in enumerate(fields):
                px = apply_colormap(Q[::-1])
                write_png(px, out_dir / "images" / f"{row_id(point, j, ph, Space.PS)}.png")
        if Space.CS in plan.spaces:
            carp = carpets(psi, ph, s.potential, drive, s.grid, IMAGE_SIZE)
            for j in range(len(states)):
                vals = resample_rows(carp[j], s.grid.x, s.hgrid.x_range)
                write_png(apply_colormap(vals),
                          out_dir / "images" / f"{row_id(point, j, ph, Space.CS)}.png")
    rows = _point_rows(plan, point, drive, energies, h)
    return PointResult(point, rows, masses, None if island is None else island.to_json())


def _worker(args):
    plan, point, drive, out_dir = args
    return generate_point(plan, point, drive, out_dir)


def _point_complete(existing: dict[str, ManifestRow], rows: list[ManifestRow], out_dir: Path) -> bool:
    for r in rows:
        old = existing.get(r.key.id)
        if (old is None or old.failed or old.config_hash != r.config_hash
                or not (out_dir / old.image_path).exists()):
            return False
    return True


def generate_dataset(plan: SweepPlan, out_dir: str | Path, jobs: int = 1,
                     progress=None) -> DatasetManifest:
    """Run the sweep into ``out_dir``; resumes from an existing manifest.

    Writes ``manifest.csv``, ``images/``, ``island_mass.csv``, ``islands.json``
    and ``failures.csv``.  Rows of grid points already complete under the same
    config hash are kept without recomputation.
    """
    if plan.settings is None:
        raise ValueError("plan has no generation settings")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mpath = out_dir / "manifest.csv"
    existing = read_manifest(mpath).by_id() if mpath.exists() else {}
    old_masses = _read_island_masses(out_dir / "island_mass.csv")
    old_islands = _read_json(out_dir / "islands.json")

    drives = plan.points()
    results: dict[int, PointResult] = {}
    todo = []
    for i, d in enumerate(drives):
        rows = _point_rows(plan, i, d, None, plan.settings.config_hash)
        if existing and _point_complete(existing, rows, out_dir):
            kept = [existing[r.key.id] for r in rows]
            uids = {r.key.state_uid for r in rows}
            masses = [m for m in old_masses if m[0] in uids]
            results[i] = PointResult(i, kept, masses, old_islands.get(f"{i:03d}"))
        else:
            todo.append((plan, i, d, out_dir))
    log.info("sweep: %d points, %d images; %d points to compute", len(drives), plan.total, len(todo))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for res in ex.map(_worker, todo):
                results[res.point] = res
                if progress:
                    progress(res)
    else:
        for args in todo:
            res = _worker(args)
            results[res.point] = res
            if progress:
                progress(res)

    ordered = [results[i] for i in range(len(drives))]
    manifest = DatasetManifest([r for res in ordered for r in res.rows], out_dir)
    write_manifest(manifest, mpath)
    _write_csv(out_dir / "island_mass.csv", ISLAND_MASS_HEADER,
               [[m[0], m[1], *map(fmt_float, m[2:])] for res in ordered for m in res.masses])
    _write_text(out_dir / "islands.json",
                json.dumps({f"{res.point:03d}": res.island for res in ordered}, indent=1,
                           sort_keys=True) + "\n")
    _write_csv(out_dir / "failures.csv", ["point", "reason"],
               [[f"{res.point:03d}", res.failure] for res in ordered if res.failure])
    return manifest


def _write_text(path: Path, text: str) -> None:
    if path.exists() and path.read_text() == text:
        return
    path.write_text(text)


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _write_text(path, buf.getvalue())


def _read_json(path: Path) -> dict:
    return json.loads(path.read_text()) if path.exists() else {}


def _read_island_masses(path: Path) -> list[list]:
    if not path.exists():
        return []
    with path.open() as fh:
        rd = csv.reader(fh)
        next(rd, None)
        return [[r[0], r[1], *map(float, r[2:])] for r in rd]


def read_island_masses(out_dir: str | Path) -> dict[tuple[str, Phase], tuple[float, tuple]]:
    """{(state_uid, phase): (mass, box)} from a generated dataset."""
    out = {}
    for m in _read_island_masses(Path(out_dir) / "island_mass.csv"):
        out[(m[0], Phase(m[1]))] = (m[2], tuple(m[3:]))
    return out


def load_pixels(manifest: DatasetManifest, rows: list[ManifestRow] | None = None) -> np.ndarray:
    rows = manifest.ok_rows if rows is None else rows
    missing = [str(manifest.image_file(r)) for r in rows if not manifest.image_file(r).exists()]
    if missing:
        raise FileNotFoundError("missing image files: " + ", ".join(missing[:10])
                                + (" ..." if len(missing) > 10 else ""))
    return np.stack([read_png(manifest.image_file(r)) for r in rows])


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentationSpec:
    p_rotation: float = 0.5
    p_scale: float = 0.5
    p_skew: float = 0.5
    p_contrast: float = 0.5
    p_saturation: float = 0.5
    p_grayscale: float = 0.2
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    rotation_max_deg: float = 15.0
    scale_range: tuple[float, float] = (0.85, 1.15)
    skew_max: float = 0.15
    contrast_range: tuple[float, float] = (0.7, 1.3)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("p_rotation", "p_scale", "p_skew", "p_contrast", "p_saturation",
                     "p_grayscale", "p_hflip", "p_vflip"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("scale_range", "contrast_range", "saturation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.rotation_max_deg < 0 or self.skew_max < 0:
            raise ValueError("rotation_max_deg and skew_max must be >= 0")

    @classmethod
    def identity(cls, rng_seed: int = 0) -> AugmentationSpec:
        return cls(0, 0, 0, 0, 0, 0, 0, 0, rng_seed=rng_seed)

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> AugmentationSpec:
        a = cfg.augmentation
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in vars(a).items()}
        return cls(**d, rng_seed=cfg.sub_seed("augment"))


def _geometric(px: np.ndarray, theta: float, scale: float, skew: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    A = np.array([[c, -s], [s, c]]) @ np.array([[scale, 0.0], [0.0, scale]]) \
        @ np.array([[1.0, skew], [0.0, 1.0]])
    M = np.linalg.inv(A)
    center = np.array([(px.shape[1] - 1) / 2.0, (px.shape[2] - 1) / 2.0])
    offset = center - M @ center
    out = np.empty(px.shape, dtype=float)
    for ch in range(3):
        out[ch] = affine_transform(px[ch].astype(float), M, offset=offset, order=1,
                                   mode="constant", cval=float(BACKGROUND[ch]))
    return out


def augment_pixels(px: np.ndarray, spec: AugmentationSpec, draw_seed: int) -> np.ndarray:
    """Augment one uint8 (3, H, W) image; deterministic in (px, spec, draw_seed)."""
    rng = np.random.default_rng([spec.rng_seed, int(draw_seed) & 0xFFFFFFFFFFFFFFFF])
    u = rng.random(8)        # application draws, fixed order
    v = rng.random(5)        # parameter draws, fixed order
    apply_rot, apply_scale, apply_skew = u[0] < spec.p_rotation, u[1] < spec.p_scale, u[2] < spec.p_skew
    apply_h, apply_v = u[3] < spec.p_hflip, u[4] < spec.p_vflip
    apply_con, apply_sat, apply_gray = u[5] < spec.p_contrast, u[6] < spec.p_saturation, u[7] < spec.p_grayscale

    out = px
    changed = False
    if apply_rot or apply_scale or apply_skew:
        theta = math.radians((2 * v[0] - 1) * spec.rotation_max_deg) if apply_rot else 0.0
        lo, hi = spec.scale_range
        scale = lo + (hi - lo) * v[1] if apply_scale else 1.0
        skew = (2 * v[2] - 1) * spec.skew_max if apply_skew else 0.0
        out = _geometric(out, theta, scale, skew)
        changed = True
    if apply_h:
        out = out[:, :, ::-1]
    if apply_v:
        out = out[:, ::-1, :]
    if apply_con or apply_sat or apply_gray:
        out = np.asarray(out, dtype=float)
        if apply_con:
            lo, hi = spec.contrast_range
            cf = lo + (hi - lo) * v[3]
            mu = float(np.tensordot(LUMA, out, axes=1).mean())
            out = np.clip(mu + cf * (out - mu), 0.0, 255.0)
        if apply_sat:
            lo, hi = spec.saturation_range
            sf = lo + (hi - lo) * v[4]
            gray = np.tensordot(LUMA, out, axes=1)[None]
            out = np.clip(gray + sf * (out - gray), 0.0, 255.0)
        if apply_gray:
            out = np.repeat(np.tensordot(LUMA, out, axes=1)[None], 3, axis=0)
        changed = True
    if changed:
        out = np.rint(np.clip(out, 0.0, 255.0)).astype(np.uint8)
    return np.ascontiguousarray(out)


def augment_image(image: StateImage, spec: AugmentationSpec, draw_seed: int) -> StateImage:
    return StateImage(augment_pixels(image.pixels, spec, draw_seed), image.space, image.key)


def draw_seed_for(epoch: int, index: int) -> int:
    """Per-(epoch, sample) draw seed so every epoch sees a fresh transform."""
    return (epoch << 32) | index


# ---------------------------------------------------------------- paper fixtures

def fixture_manifest(rows: list[dict], omega: float, F: float, config_hash: str = "fixture") -> DatasetManifest:
    """Manifest built from energy-table fixture rows (PS space, phase 0)."""
    out = []
    for r in rows:
        rid = f"fx-{int(r['index']):02d}"
        key = ParameterKey(rid, Space.PS, Phase.T0, omega, float(r.get("F", F)),
                           float(r["F_st"]), float(r["Re_E"]), float(r["Im_E"]))
        out.append(ManifestRow(key, "", config_hash))
    return DatasetManifest(out)
