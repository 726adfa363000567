"""``atlas`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig

log = logging.getLogger("atlas")

STAGES = ["poincare", "generate", "augment-preview", "train", "embed", "select-k", "cluster",
          "report", "all"]
UPSTREAM = {"train": "generate", "embed": "train", "cluster": "embed", "select-k": "embed",
            "report": "cluster"}


class StageError(ValueError):
    """Validation failure of a stage's inputs (exit code 1)."""


class Paths:
    def __init__(self, root: Path):
        self.root = root
        self.poincare = root / "poincare"
        self.dataset = root / "dataset"
        self.preview = root / "augment_preview"
        self.model = root / "model"
        self.embeddings = root / "embeddings"
        self.clusters = root / "clusters"
        self.report = root / "report"

    def stage_dir(self, stage: str) -> Path:
        return {"poincare": self.poincare, "generate": self.dataset, "train": self.model,
                "embed": self.embeddings, "cluster": self.clusters, "select-k": self.clusters,
                "report": self.report}[stage]


def _stamp(directory: Path, stage: str, cfg: PipelineConfig, **extra) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    p = directory / "stage.json"
    p.write_text(json.dumps({"stage": stage, "config_hash": cfg.digest(_hash_stage(stage)),
                             **extra}, indent=1, sort_keys=True) + "\n")
    return p


def _hash_stage(stage: str) -> str:
    return {"select-k": "cluster"}.get(stage, stage)


def _check_upstream(paths: Paths, stage: str, cfg: PipelineConfig, force: bool) -> None:
    """Refuse to run against upstream artifacts built from a different config."""
    up = UPSTREAM.get(stage)
    if up is None:
        return
    chain = []
    while up is not None:
        chain.append(up)
        up = UPSTREAM.get(up)
    for s in chain:
        stamp = paths.stage_dir(s) / "stage.json"
        if s == "cluster" and not (paths.clusters / "labels.csv").exists():
            raise StageError("missing clusters: run `atlas cluster` first")
        if not stamp.exists():
            what = {"generate": "dataset", "train": "model checkpoint", "embed": "embeddings",
                    "cluster": "clusters"}[s]
            raise StageError(f"missing {what}: run `atlas {s}` first")
        have = json.loads(stamp.read_text()).get("config_hash")
        want = cfg.digest(s)
        if have != want:
            msg = f"stale {s} artifacts (config hash {have} != {want})"
            if not force:
                raise StageError(msg + "; rerun upstream or pass --force")
            log.warning("%s; continuing because of --force", msg)


# ---------------------------------------------------------------- stages

def poincare_overview(cfg: PipelineConfig, omega: float | None = None, F: float | None = None,
                      F_st: float | None = None, n_periods: int = 120):
    """Sections at the three phases for one drive, plus the island windows."""
    from .classical import classical_poincare_section, find_island, locate_resonance
    from .dataset import potential_from_config
    from .floquet import PHASES, DriveParameters
    pot = potential_from_config(cfg)
    r = cfg.resonance
    if omega is None:
        omega = (cfg.sweep.omega_values[0] if cfg.sweep.omega_values
                 else locate_resonance(pot, r.target_amplitude))
    drive = DriveParameters(F=cfg.sweep.F_values[0] if F is None else F,
                            F_st=cfg.sweep.F_st_values[0] if F_st is None else F_st, omega=omega)
    xs = np.linspace(-0.9 * r.window, 0.9 * r.window, r.section_seeds)
    ic = np.column_stack([xs, np.zeros_like(xs)])
    sections = [classical_poincare_section(pot, drive, ic, n_periods, ph.angle, r.n_time_steps,
                                           r.window) for ph in PHASES]
    island = find_island(pot, drive, r.window, r.island_diameter_fraction, r.island_pad,
                         n_periods=r.n_periods, n_steps=r.n_time_steps)
    boxes = [None if island is None else island.boxes[ph] for ph in PHASES]
    title = f"omega={omega:.4f} F={drive.F:g} F_st={drive.F_st:g}"
    return drive, sections, boxes, island, title


def stage_poincare(cfg, paths: Paths, args) -> list[Path]:
    import csv
    from .report import _poincare_plot
    drive, sections, boxes, island, title = poincare_overview(cfg)
    d = paths.poincare
    d.mkdir(parents=True, exist_ok=True)
    with (d / "sections.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phase", "orbit", "x", "p", "config_hash"])
        for sec, tok in zip(sections, ("0", "T4", "T2")):
            for (x, p), o in zip(sec.points, sec.orbit_index):
                w.writerow([tok, int(o), repr(float(x)), repr(float(p)), cfg.digest("poincare")])
    png = d / "sections.png"
    _poincare_plot(png, sections, boxes, title)
    isl = d / "island.json"
    isl.write_text(json.dumps({"omega": drive.omega, "F": drive.F, "F_st": drive.F_st,
                               "island": None if island is None else island.to_json(),
                               "config_hash": cfg.digest("poincare")}, indent=1) + "\n")
    print(f"resonance frequency {drive.omega:.10g}; island "
          f"{'found' if island is not None else 'not found'}")
    return [d / "sections.csv", png, isl, _stamp(d, "poincare", cfg)]


def stage_generate(cfg, paths: Paths, args) -> list[Path]:
    from .dataset import generate_dataset, plan_sweep
    plan = plan_sweep(cfg)
    print(f"sweep: {plan.n_points} grid points, {plan.total} images"
          + (f" (omega_res = {plan.omega_res:.10g})" if plan.omega_res else ""))
    t0 = time.perf_counter()

    def progress(res):
        state = "failed: " + res.failure if res.failure else "ok"
        log.info("point %03d %s (%.0f s)", res.point, state, time.perf_counter() - t0)

    m = generate_dataset(plan, paths.dataset, jobs=args.jobs, progress=progress)
    n_failed = sum(r.failed for r in m.rows)
    if n_failed:
        print(f"{n_failed} rows failed; see {paths.dataset / 'failures.csv'}")
    return [paths.dataset / "manifest.csv", paths.dataset / "island_mass.csv",
            _stamp(paths.dataset, "generate", cfg, total=plan.total, failed=n_failed,
                   omega_res=plan.omega_res)]


def stage_augment_preview(cfg, paths: Paths, args) -> list[Path]:
    from PIL import Image
    from .dataset import AugmentationSpec, augment_pixels, read_manifest
    from .phase_portrait import read_png
    mpath = paths.dataset / "manifest.csv"
    if not mpath.exists():
        raise StageError("missing dataset: run `atlas generate` first")
    m = read_manifest(mpath)
    spec = AugmentationSpec.from_config(cfg)
    paths.preview.mkdir(parents=True, exist_ok=True)
    out = []
    for r in m.ok_rows[:args.n]:
        px = read_png(m.image_file(r))
        canvas = Image.new("RGB", (150 * (args.variants + 1), 150))
        canvas.paste(Image.fromarray(np.moveaxis(px, 0, -1)), (0, 0))
        for v in range(args.variants):
            a = augment_pixels(px, spec, v)
            canvas.paste(Image.fromarray(np.ascontiguousarray(np.moveaxis(a, 0, -1))),
                         (150 * (v + 1), 0))
        p = paths.preview / f"{r.key.id}.png"
        canvas.save(p, format="PNG")
        out.append(p)
    return out


def train_config(cfg: PipelineConfig, args=None):
    from .dataset import AugmentationSpec
    from .repr import TrainConfig
    t = cfg.training
    epochs = t.epochs if getattr(args, "epochs", None) is None else args.epochs
    return TrainConfig(t.learning_rate, t.entropy_weight, t.batch_size, epochs,
                       cfg.sub_seed("train") % (2**63), AugmentationSpec.from_config(cfg),
                       t.beta1, t.beta2, t.eps_adam, t.embedding_dim, t.holdout_fraction,
                       t.max_train_images, bool(getattr(args, "deterministic", True)),
                       cfg.digest("train"))


def stage_train(cfg, paths: Paths, args) -> list[Path]:
    from .dataset import read_manifest
    from .repr import train
    _check_upstream(paths, "train", cfg, args.force)
    m = read_manifest(paths.dataset / "manifest.csv")
    tc = train_config(cfg, args)

    def progress(rec):
        log.info("epoch %d: mean loss %.6f (consistency %.6f, entropy %.6f)", rec.epoch,
                 rec.mean_loss, rec.consistency_term, rec.entropy_term)

    _, hist = train(m, tc, paths.model, progress=progress, budget_seconds=args.budget_seconds)
    return [paths.model / "checkpoint.bin", paths.model / "loss_history.csv",
            _stamp(paths.model, "train", cfg, epochs_done=len(hist))]


def stage_embed(cfg, paths: Paths, args) -> list[Path]:
    from .dataset import read_manifest
    from .repr import embed_dataset, load_checkpoint, write_embeddings
    _check_upstream(paths, "embed", cfg, args.force)
    ck = load_checkpoint(paths.model / "checkpoint.bin")
    if ck.config_hash != cfg.digest("train") and not args.force:
        raise StageError("stale model checkpoint; rerun `atlas train` or pass --force")
    m = read_manifest(paths.dataset / "manifest.csv")
    vecs = embed_dataset(ck.params, m)
    paths.embeddings.mkdir(parents=True, exist_ok=True)
    p = paths.embeddings / "embeddings.csv"
    write_embeddings(p, vecs, cfg.digest("embed"))
    return [p, _stamp(paths.embeddings, "embed", cfg)]


def _load_embeddings(paths: Paths):
    from .repr import read_embeddings
    p = paths.embeddings / "embeddings.csv"
    if not p.exists():
        raise StageError("missing embeddings: run `atlas embed` first")
    ids, E, h = read_embeddings(p)
    return ids, E, h


def _space_split(ids, E):
    out = {}
    for sp in ("CS", "PS"):
        sel = [i for i, x in enumerate(ids) if x.endswith("-" + sp)]
        if sel:
            out[sp] = ([ids[i] for i in sel], E[sel])
    return out


def _k_range(cfg, n, lo=None, hi=None):
    lo = cfg.clustering.k_min if lo is None else lo
    hi = cfg.clustering.k_max if hi is None else hi
    hi = min(hi, n - 1)
    if hi < lo:
        raise StageError(f"K range [{lo}, {hi}] is empty for {n} points")
    return range(lo, hi + 1)


def stage_select_k(cfg, paths: Paths, args) -> list[Path]:
    from .cluster import select_k, write_silhouette_table
    if not (paths.embeddings / "embeddings.csv").exists():
        raise StageError("missing embeddings: run `atlas embed` first")
    _check_upstream(paths, "select-k", cfg, args.force)
    ids, E, _ = _load_embeddings(paths)
    paths.clusters.mkdir(parents=True, exist_ok=True)
    out = []
    for sp, (sid, X) in _space_split(ids, E).items():
        rep = select_k(X, _k_range(cfg, len(X), args.min, args.max), cfg.sub_seed("cluster") % 2**32,
                       cfg.clustering.n_restarts, cfg.clustering.tol, cfg.clustering.max_iter)
        p = paths.clusters / f"silhouette_{sp}.csv"
        write_silhouette_table(p, rep)
        print(f"{sp}: recommended K = {rep.recommended} (mean silhouette {rep.mean:.4f})")
        out.append(p)
    return out


def stage_cluster(cfg, paths: Paths, args) -> list[Path]:
    from .cluster import kmeans_fit, pca_project, select_k, write_labels, write_pca, \
        write_silhouette_table
    if not (paths.embeddings / "embeddings.csv").exists():
        raise StageError("missing embeddings: run `atlas embed` first")
    _check_upstream(paths, "cluster", cfg, args.force)
    ids, E, _ = _load_embeddings(paths)
    seed = cfg.sub_seed("cluster") % 2**32
    cl = cfg.clustering
    paths.clusters.mkdir(parents=True, exist_ok=True)
    all_ids, all_labels, out, chosen = [], [], [], {}
    for sp, (sid, X) in _space_split(ids, E).items():
        K = args.k or cl.k
        if not K:
            rep = select_k(X, _k_range(cfg, len(X)), seed, cl.n_restarts, cl.tol, cl.max_iter)
            p = paths.clusters / f"silhouette_{sp}.csv"
            write_silhouette_table(p, rep)
            out.append(p)
            K = rep.recommended
        model, a = kmeans_fit(X, K, cl.tol, seed, cl.n_restarts, cl.max_iter)
        chosen[sp] = K
        all_ids += sid
        all_labels += [f"{sp}:{l}" for l in a.labels]
        proj, ratios, _ = pca_project(X, min(2, X.shape[1]))
        p = paths.clusters / f"pca_{sp}.csv"
        write_pca(p, sid, proj)
        out.append(p)
    p = paths.clusters / "labels.csv"
    write_labels(p, all_ids, all_labels)
    print("clusters: " + ", ".join(f"{sp} K={k}" for sp, k in chosen.items()))
    return [p] + out + [_stamp(paths.clusters, "cluster", cfg, K=chosen)]


def stage_report(cfg, paths: Paths, args) -> list[Path]:
    import csv
    from .cluster import read_labels
    from .dataset import read_island_masses, read_manifest
    from .report import Thresholds, cluster_dossier, emit_report, flag_candidates
    _check_upstream(paths, "report", cfg, args.force)
    ids, E, h = _load_embeddings(paths)
    if h != cfg.digest("embed") and not args.force:
        raise StageError("embeddings were produced under a different config hash")
    m = read_manifest(paths.dataset / "manifest.csv")
    hashes = {r.config_hash for r in m.rows}
    if len(hashes) > 1 and not args.force:
        raise StageError(f"manifest mixes config hashes {sorted(hashes)}")
    labels = read_labels(paths.clusters / "labels.csv")
    emb = dict(zip(ids, E))
    masses = {k: v[0] for k, v in read_island_masses(paths.dataset).items()}
    uniq = sorted(set(labels.values()))
    dossiers = [cluster_dossier(l, labels, m) for l in uniq]
    r = cfg.report
    flags = flag_candidates(dossiers, emb, masses,
                            Thresholds(r.coherence_threshold, r.mass_threshold, r.dispersion_threshold))
    pca = {}
    for sp in ("CS", "PS"):
        p = paths.clusters / f"pca_{sp}.csv"
        if p.exists():
            with p.open() as fh:
                rows = list(csv.reader(fh))[1:]
            pca[sp] = (np.array([[float(v) for v in row[1:]] for row in rows]),
                       [labels[row[0]] for row in rows])
    poincare = []
    try:
        drive, sections, boxes, _, title = poincare_overview(cfg, n_periods=60)
        poincare.append((title, sections, boxes))
    except ValueError as exc:      # no resonance for this potential
        log.warning("Poincare overlay skipped: %s", exc)
    written = emit_report(dossiers, flags, paths.report, manifest=m, config_hash=cfg.digest("report"),
                          pca=pca, poincare=poincare)
    counts = {}
    for f in flags:
        counts[f.verdict.value] = counts.get(f.verdict.value, 0) + 1
    print("verdicts: " + (", ".join(f"{k} {v}" for k, v in sorted(counts.items())) or "none"))
    return written + [_stamp(paths.report, "report", cfg)]


def stage_all(cfg, paths: Paths, args) -> list[Path]:
    out = []
    for fn in (stage_poincare, stage_generate, stage_train, stage_embed, stage_cluster,
               stage_report):
        out += fn(cfg, paths, args)
    return out


HANDLERS = {"poincare": stage_poincare, "generate": stage_generate,
            "augment-preview": stage_augment_preview, "train": stage_train, "embed": stage_embed,
            "select-k": stage_select_k, "cluster": stage_cluster, "report": stage_report,
            "all": stage_all}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline TOML file")
    common.add_argument("--seed", type=int, default=None, help="override the global seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for parallel stages")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded reductions for bit-reproducibility")
    common.add_argument("--force", action="store_true", help="ignore stale upstream config hashes")
    common.add_argument("--out", default=None, help="output root (ATLAS_OUT takes precedence)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="atlas", description=__doc__)
    sub = ap.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common])
        if name in ("train", "all"):
            p.add_argument("--epochs", type=int, default=None)
            p.add_argument("--budget-seconds", type=float, default=None,
                           help="stop training after the epoch that exceeds this wall time")
        if name == "select-k":
            p.add_argument("--min", type=int, default=None)
            p.add_argument("--max", type=int, default=None)
        if name in ("cluster", "all"):
            p.add_argument("--k", type=int, default=0, help="fixed K (default: silhouette choice)")
        if name == "augment-preview":
            p.add_argument("--n", type=int, default=4, help="number of manifest rows")
            p.add_argument("--variants", type=int, default=5)
    return ap


def run_subcommand(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:        # argparse exits 2 on usage errors
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for name, default in (("epochs", None), ("budget_seconds", None), ("k", 0),
                          ("min", None), ("max", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        cfg = PipelineConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.out and "ATLAS_OUT" not in os.environ:
            cfg = cfg.replace(output_root=args.out)
        if args.deterministic:
            import torch
            torch.set_num_threads(1)
        paths = Paths(cfg.out_root())
        written = HANDLERS[args.stage](cfg, paths, args)
    except (ConfigError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for p in written:
        print(p)
    return 0


def main() -> None:
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
