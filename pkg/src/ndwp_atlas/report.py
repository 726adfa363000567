"""Cluster dossiers, the three validation criteria, candidate flags and the static report."""
from __future__ import annotations

import csv
import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import DatasetManifest, ParameterKey, fmt_float
from .floquet import PHASES, Phase
from .phase_portrait import Space, box_mass_fraction

COHERENCE_THRESHOLD = 0.8
MASS_THRESHOLD = 0.5
DISPERSION_THRESHOLD = 1.0
FLAGS_HEADER = ["label", "verdict", "coherence", "min_mass", "dispersion_ratio"]


class Verdict(str, enum.Enum):
    NDWP = "NDWP_Candidate"
    FPS = "FPS_Like"
    REJECTED = "Rejected"


# ---------------------------------------------------------------- fixtures

def load_fixture(name: str) -> list[dict]:
    """Energy table shipped under ``fixtures/`` ("table1" or "table2")."""
    text = resources.files("ndwp_atlas").joinpath("fixtures", f"{name}.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    out = []
    for r in rows:
        d = {k: float(v) for k, v in r.items() if k != "index"}
        d["index"] = int(r["index"])
        out.append(d)
    return out


def strict_trend(x, y) -> str:
    """'decreasing', 'increasing' or 'none' for y ordered by ascending x."""
    order = np.argsort(np.asarray(x, dtype=float), kind="stable")
    d = np.diff(np.asarray(y, dtype=float)[order])
    if len(d) and np.all(d < 0):
        return "decreasing"
    if len(d) and np.all(d > 0):
        return "increasing"
    return "none"


def fixture_trends(rows: list[dict], along: str = "F_st") -> dict[str, str]:
    x = [r[along] for r in rows]
    return {"Re_E": strict_trend(x, [r["Re_E"] for r in rows]),
            "abs_Im_E": strict_trend(x, [abs(r["Im_E"]) for r in rows])}


# ---------------------------------------------------------------- dossiers

@dataclass
class ClusterDossier:
    label: str
    members: list[ParameterKey]
    modal_omega: float
    coherence: float
    representatives: dict[tuple[str, str], str] = field(default_factory=dict)  # (phase, space) -> path
    energy_spread: float = 0.0

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError(f"cluster {self.label} has no members")
        if not 0.0 <= self.coherence <= 1.0:
            raise ValueError("coherence must lie in [0, 1]")

    def table(self) -> list[ParameterKey]:
        """Members ordered by F_st, then F, then id."""
        return sorted(self.members, key=lambda k: (k.F_st, k.F, k.id))


def coherence_of(omegas) -> tuple[float, float]:
    counts = Counter(float(w) for w in omegas)
    if not counts:
        raise ValueError("no members")
    # Most frequent value; ties go to the smaller omega.
    modal, n = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return modal, n / sum(counts.values())


def cluster_dossier(label: str, labels: dict[str, str], manifest: DatasetManifest) -> ClusterDossier:
    by_id = manifest.by_id()
    members = [by_id[i].key for i, l in labels.items() if l == label and i in by_id]
    if not members:
        raise ValueError(f"cluster {label} is empty or unknown")
    modal, coh = coherence_of([k.omega for k in members])
    spread = float(np.ptp([k.Re_E for k in members])) if len(members) > 1 else 0.0
    rep = sorted(members, key=lambda k: (k.F_st, k.F, k.id))[0].state_uid
    reps = {}
    for r in manifest.rows:
        if r.key.state_uid == rep and not r.failed:
            reps[(r.key.t_phase.value, r.key.space.value)] = r.image_path
    return ClusterDossier(label, members, modal, coh, reps, spread)


def frequency_coherence_filter(dossiers: list[ClusterDossier],
                               threshold: float = COHERENCE_THRESHOLD) -> list[str]:
    return [d.label for d in dossiers if d.coherence >= threshold]


# ---------------------------------------------------------------- persistence

@dataclass
class PersistenceScore:
    masses: dict[Phase, float]
    minimum: float
    windows: dict[Phase, tuple[float, float, float, float]]

    def __post_init__(self) -> None:
        for ph, m in self.masses.items():
            if not (0.0 <= m <= 1.0):
                raise ValueError(f"mass at {ph.value} outside [0, 1]")


def persistence_score(fields: dict, windows: dict, xs: np.ndarray, ps: np.ndarray) -> PersistenceScore:
    """Fraction of Husimi mass inside the island window at each of the three phases.

    ``fields`` maps each phase to a (n_p, n_x) Husimi array; ``windows`` maps
    each phase to (x_lo, x_hi, p_lo, p_hi).
    """
    masses = {}
    for ph in PHASES:
        if ph not in fields or ph not in windows:
            raise ValueError(f"missing phase {ph.value}")
        masses[ph] = box_mass_fraction(np.asarray(fields[ph]), xs, ps, windows[ph])
    return PersistenceScore(masses, min(masses.values()), {ph: tuple(windows[ph]) for ph in PHASES})


# ---------------------------------------------------------------- flags

@dataclass
class Thresholds:
    coherence: float = COHERENCE_THRESHOLD
    mass: float = MASS_THRESHOLD
    dispersion: float = DISPERSION_THRESHOLD


@dataclass
class CandidateFlag:
    label: str
    verdict: Verdict
    reasons: list[str]
    coherence: float
    min_mass: float
    dispersion_ratio: float
    t0_mass: float = math.nan

    def __post_init__(self) -> None:
        self.verdict = Verdict(self.verdict)


def _median_distance(E: np.ndarray) -> float:
    return float(np.median(np.linalg.norm(E - E.mean(axis=0), axis=1)))


def dispersion_ratio(member_ids: list[str], embeddings: dict[str, np.ndarray],
                     reference: np.ndarray) -> float:
    """Mean distance of member embeddings to their centroid over the dataset median."""
    E = np.array([embeddings[i] for i in member_ids if i in embeddings])
    if len(E) == 0:
        return math.nan
    spread = float(np.mean(np.linalg.norm(E - E.mean(axis=0), axis=1)))
    med = _median_distance(reference)
    if med == 0:
        return 0.0 if spread == 0 else math.inf
    return spread / med


def _counterpart(key: ParameterKey) -> str:
    other = "CS" if key.space is Space.PS else "PS"
    return f"{key.state_uid}-{key.t_phase.value}-{other}"


def flag_candidates(dossiers: list[ClusterDossier], embeddings: dict[str, np.ndarray],
                    masses: dict[tuple[str, Phase], float],
                    thresholds: Thresholds | None = None) -> list[CandidateFlag]:
    """Evaluate coherence, dual-space consistency and persistence per cluster.

    ``embeddings`` maps row id to embedding (both spaces); ``masses`` maps
    (state_uid, phase) to island mass.  Missing data makes a criterion
    inconclusive, which rejects the cluster.
    """
    th = thresholds or Thresholds()
    flags = []
    for d in dossiers:
        reasons = []
        c1 = d.coherence >= th.coherence
        reasons.append(f"frequency coherence {d.coherence:.2f} {'>=' if c1 else '<'} {th.coherence}")

        other_space = "CS" if d.members[0].space is Space.PS else "PS"
        ref = np.array([v for i, v in embeddings.items() if i.endswith("-" + other_space)])
        ratio = math.nan
        if len(ref):
            ratio = dispersion_ratio([_counterpart(k) for k in d.members], embeddings, ref)
        if math.isnan(ratio):
            c2 = False
            reasons.append(f"dual-space dispersion inconclusive (no {other_space} embeddings)")
        else:
            c2 = ratio < th.dispersion
            reasons.append(f"dual-space dispersion ratio {ratio:.3f} {'<' if c2 else '>='} "
                           f"{th.dispersion}")

        uids = sorted({k.state_uid for k in d.members})
        mins, t0s = [], []
        for u in uids:
            ms = [masses.get((u, ph), math.nan) for ph in PHASES]
            mins.append(min(ms) if not any(math.isnan(m) for m in ms) else math.nan)
            t0s.append(ms[0])
        if any(math.isnan(m) for m in mins):
            med, t0 = math.nan, math.nan
            c3 = c3_t0 = False
            reasons.append("persistence inconclusive (no island window or missing phase)")
        else:
            med, t0 = float(np.median(mins)), float(np.median(t0s))
            c3 = med >= th.mass
            c3_t0 = t0 >= th.mass
            reasons.append(f"median min island mass {med:.3f} {'>=' if c3 else '<'} {th.mass}")
            reasons.append(f"median T0 island mass {t0:.3f}")

        driven = np.mean([k.F > 0 for k in d.members]) >= 0.5
        if c1 and c2 and c3 and driven:
            verdict = Verdict.NDWP
        elif c1 and c2 and c3_t0:
            verdict = Verdict.FPS
            if not driven:
                reasons.append("undriven (F = 0): field-free localized state")
        else:
            verdict = Verdict.REJECTED
        flags.append(CandidateFlag(d.label, verdict, reasons, d.coherence, med, ratio, t0))
    return flags


def write_flags(path: str | Path, flags: list[CandidateFlag]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FLAGS_HEADER)
        for f in flags:
            w.writerow([f.label, f.verdict.value, fmt_float(f.coherence), fmt_float(f.min_mass),
                        fmt_float(f.dispersion_ratio)])


def read_flags(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- report

def _gallery(d: ClusterDossier, root: Path, out: Path) -> bool:
    """CS row on top, PS row below, columns at phases 0, T/4, T/2."""
    canvas = Image.new("RGB", (450, 300))
    found = False
    for r, sp in enumerate(("CS", "PS")):
        for c, ph in enumerate(PHASES):
            rel = d.representatives.get((ph.value, sp))
            if rel and (root / rel).exists():
                with Image.open(root / rel) as im:
                    canvas.paste(im.convert("RGB"), (150 * c, 150 * r))
                found = True
    if found:
        canvas.save(out, format="PNG")
    return found


def _scatter(path: Path, proj: np.ndarray, labels: list[str], title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    uniq = sorted(set(labels), key=_label_sort)
    cmap = plt.get_cmap("tab20")
    for j, l in enumerate(uniq):
        sel = np.array([x == l for x in labels])
        ax.scatter(proj[sel, 0], proj[sel, 1] if proj.shape[1] > 1 else np.zeros(sel.sum()),
                   s=6, color=cmap(j % 20), label=l)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.set_title(title)
    if len(uniq) <= 12:
        ax.legend(fontsize=6, markerscale=2)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def _poincare_plot(path: Path, sections: list, boxes: list, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle
    fig, axes = plt.subplots(1, len(sections), figsize=(4 * len(sections), 4), dpi=100)
    axes = np.atleast_1d(axes)
    for ax, sec, box, ph in zip(axes, sections, boxes, PHASES):
        ax.plot(sec.points[:, 0], sec.points[:, 1], ",", color="k")
        if box is not None:
            x0, x1, p0, p1 = box
            ax.add_patch(Rectangle((x0, p0), x1 - x0, p1 - p0, fill=False, color="r"))
        ax.set_xlim(-sec.window, sec.window)
        ax.set_ylim(-sec.window, sec.window)
        ax.set_title(f"{title} phase {ph.value}")
        ax.set_xlabel("x")
        ax.set_ylabel("p")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def _label_sort(label: str):
    space, _, num = label.partition(":")
    return (space, int(num) if num.isdigit() else num)


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


def emit_report(dossiers: list[ClusterDossier], flags: list[CandidateFlag], out_dir: str | Path,
                *, manifest: DatasetManifest | None = None, config_hash: str = "",
                pca: dict | None = None, poincare: list | None = None) -> list[Path]:
    """Write report.md, flags.csv and PNG assets; returns the written paths.

    ``pca`` maps a space name to (projected points, labels).  ``poincare`` is a
    list of (title, [sections at 0, T/4, T/2], [boxes]) entries.
    """
    out_dir = Path(out_dir)
    assets = out_dir / "assets"
    assets.mkdir(parents=True, exist_ok=True)
    written = []
    flag_by = {f.label: f for f in flags}
    root = manifest.root if manifest is not None and manifest.root else out_dir

    lines = ["# Cluster atlas report", "", f"Config hash: `{config_hash}`", ""]
    if not dossiers:
        lines += ["> **Empty run**: no clusters were produced, so nothing was flagged.", ""]
    counts = Counter(f.verdict.value for f in flags)
    lines += ["## Verdicts", "",
              "| label | verdict | coherence | median min mass | dispersion ratio |",
              "|---|---|---|---|---|"]
    for f in sorted(flags, key=lambda f: _label_sort(f.label)):
        lines.append(f"| {f.label} | {f.verdict.value} | {_fmt(f.coherence)} | {_fmt(f.min_mass)} "
                     f"| {_fmt(f.dispersion_ratio)} |")
    lines += ["", "Totals: " + ", ".join(f"{v.value} {counts.get(v.value, 0)}" for v in Verdict), ""]

    if pca:
        lines += ["## Embedding projections", ""]
        for space in sorted(pca):
            proj, labs = pca[space]
            p = assets / f"pca_{space}.png"
            _scatter(p, np.asarray(proj), list(labs), f"{space} embeddings")
            written.append(p)
            lines += [f"![{space} PCA](assets/{p.name})", ""]

    if poincare:
        lines += ["## Classical sections with island windows", ""]
        for i, (title, sections, boxes) in enumerate(poincare):
            p = assets / f"poincare_{i:02d}.png"
            _poincare_plot(p, sections, boxes, title)
            written.append(p)
            lines += [f"![{title}](assets/{p.name})", ""]

    lines += ["## Clusters", ""]
    for d in sorted(dossiers, key=lambda d: _label_sort(d.label)):
        f = flag_by.get(d.label)
        lines += [f"### Cluster {d.label}", "",
                  f"Members: {len(d.members)}; modal omega {fmt_float(d.modal_omega)}; "
                  f"coherence {d.coherence:.3f}; Re_E spread {d.energy_spread:.3e}", ""]
        if f is not None:
            lines += [f"Verdict: **{f.verdict.value}**", ""] + [f"- {r}" for r in f.reasons] + [""]
        safe = d.label.replace(":", "_")
        g = assets / f"gallery_{safe}.png"
        if _gallery(d, root, g):
            written.append(g)
            lines += [f"![gallery {d.label}](assets/{g.name})", ""]
        lines += ["| # | id | omega | F | F_st | Re[E] | Im[E] |", "|---|---|---|---|---|---|---|"]
        for n, k in enumerate(d.table(), 1):
            lines.append(f"| {n} | {k.id} | {fmt_float(k.omega)} | {fmt_float(k.F)} | "
                         f"{fmt_float(k.F_st)} | {fmt_float(k.Re_E)} | {fmt_float(k.Im_E)} |")
        lines.append("")

    md = out_dir / "report.md"
    md.write_text("\n".join(lines) + "\n")
    fl = out_dir / "flags.csv"
    write_flags(fl, flags)
    return [md, fl] + written
