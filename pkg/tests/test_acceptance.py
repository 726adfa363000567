"""Exit criteria: one PASS/FAIL line per criterion (see the terminal summary).

Criteria 6 and 9 run the desk pipeline.  Their artifacts live under
``ATLAS_ACCEPTANCE_DIR`` (default: the pytest cache), and the generated
datasets are reused between sessions because generation is resumable.
"""
from __future__ import annotations

import csv
import itertools
import math
import os
import time
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from conftest import record_acceptance
from ndwp_atlas import cli
from ndwp_atlas.cluster import kmeans_fit, silhouette_score
from ndwp_atlas.config import PipelineConfig
from ndwp_atlas.dataset import load_pixels, read_island_masses, read_manifest
from ndwp_atlas.floquet import (PHASES, DriveParameters, FloquetState, GridSpec, PotentialSpec,
                                floquet_states, one_period_propagator)
from ndwp_atlas.phase_portrait import HusimiGrid, coherent_state, husimi_field, husimi_mass
from ndwp_atlas.repr import (TrainConfig, batch_loss, embed_pixels, gradients, init_params,
                             reduced_descriptor, split_rows, train, zero_params)
from ndwp_atlas.report import fixture_trends, load_fixture, read_flags

pytestmark = pytest.mark.acceptance


def packaged_config(name: str) -> Path:
    return Path(str(resources.files("ndwp_atlas").joinpath("configs", name)))


@pytest.fixture(scope="session")
def acceptance_dir(request) -> Path:
    env = os.environ.get("ATLAS_ACCEPTANCE_DIR")
    d = Path(env) if env else request.config.cache.mkdir("acceptance")
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------- 1 Floquet

def test_c01_harmonic_quasienergies():
    t0 = time.perf_counter()
    drive = DriveParameters(omega=1.0)
    grid = GridSpec(256, -12.0, 12.0, 2048)
    states = floquet_states(one_period_propagator(PotentialSpec(beta=0.0), drive, grid),
                            drive, grid, 10)
    dt = time.perf_counter() - t0
    err = max(abs(s.quasienergy + 0.5) for s in states)
    ok = err < 1e-6 and dt < 10.0
    record_acceptance(1, ok, "harmonic Floquet", f"{len(states)} states, max |eps + 0.5| = "
                      f"{err:.2e}, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 2 Husimi

def test_c02_husimi_coherent_state():
    t0 = time.perf_counter()
    grid = GridSpec(256, -12.0, 12.0, 256)
    hg = HusimiGrid((-10.0, 10.0), (-10.0, 10.0), (201, 201))     # lattice contains (1, -2)
    f = husimi_field(FloquetState(coherent_state(grid.x, 1.0, -2.0), 0.0, 0.0), grid, hg)
    peak_err = abs(f.values.max() - 1 / math.pi)
    j, i = np.unravel_index(np.argmax(f.values), f.values.shape)
    mass_err = abs(husimi_mass(f, hg) - 1.0)
    dt = time.perf_counter() - t0
    ok = (peak_err < 1e-3 and mass_err < 1e-2 and dt < 5.0
          and abs(hg.xs[i] - 1.0) < 1e-9 and abs(hg.ps[j] + 2.0) < 1e-9)
    record_acceptance(2, ok, "Husimi", f"peak error {peak_err:.1e}, mass error {mass_err:.1e}, "
                      f"{dt:.2f} s")
    assert ok


# ---------------------------------------------------------------- 3 gradients

def _fd_worst(p, orig, aug, lam, h=1e-5):
    g, _ = gradients(p, orig, aug, lam)
    worst = 0.0
    for name, arr in p.arrays.items():
        for idx in np.ndindex(arr.shape):
            q = p.copy()
            q.arrays[name][idx] += h
            up = batch_loss(q, orig, aug, lam).total
            q.arrays[name][idx] -= 2 * h
            dn = batch_loss(q, orig, aug, lam).total
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(fd - g[name][idx]) / max(abs(fd), abs(g[name][idx]), 1e-6))
    return worst


def test_c03_gradient_suite():
    t0 = time.perf_counter()
    worst, n_params = 0.0, 0
    for seed in range(4):
        rng = np.random.default_rng(seed)
        p = init_params(reduced_descriptor(5), seed)
        for k in p.arrays:
            if k.endswith(".bias"):
                p.arrays[k] = rng.normal(scale=0.05, size=p.arrays[k].shape)
        orig = rng.uniform(0, 1, (4, 3, 20, 20))
        aug = np.clip(orig + rng.normal(scale=0.2, size=orig.shape), 0, 1)
        worst = max(worst, _fd_worst(p, orig, aug, 1.0))
        n_params = sum(a.size for a in p.arrays.values())
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 120.0
    record_acceptance(3, ok, "gradient suite", f"{n_params} parameters x 4 instances, worst "
                      f"relative error {worst:.1e}, {dt:.1f} s")
    assert ok


# ---------------------------------------------------------------- 4 loss floor

def test_c04_loss_floor():
    rng = np.random.default_rng(2024)
    lam, n = 1.0, 5
    floor = lam * -math.log(n)
    gap = math.inf
    for b in range(100):
        # Even batches sit near the floor: tiny weights and near-identical copies.
        near = b % 2 == 0
        p = init_params(reduced_descriptor(n), b)
        for k in p.arrays:
            p.arrays[k] = p.arrays[k] * (rng.uniform(0.01, 0.1) if near else rng.uniform(0.5, 20))
        size = int(rng.integers(1, 9))
        orig = rng.uniform(0, 1, (size, 3, 20, 20))
        aug = (np.clip(orig + rng.normal(scale=1e-3, size=orig.shape), 0, 1) if near
               else rng.uniform(0, 1, (size, 3, 20, 20)))
        gap = min(gap, batch_loss(p, orig, aug, lam).total - floor)
    imgs = rng.uniform(0, 1, (6, 3, 20, 20))
    eq = batch_loss(zero_params(reduced_descriptor(n)), imgs, imgs.copy(), lam).total
    ok = gap >= -1e-12 and abs(eq - floor) < 1e-12
    record_acceptance(4, ok, "loss floor", f"min(loss - floor) over 100 batches = {gap:.3e}; "
                      f"equality case {eq:.15f} vs {floor:.15f}")
    assert ok


# ---------------------------------------------------------------- 5 k-means oracle

def _brute_force(X, K):
    best = math.inf
    for labels in itertools.product(range(K), repeat=len(X)):
        lab = np.array(labels)
        if len(set(labels)) == K:
            best = min(best, sum(((X[lab == k] - X[lab == k].mean(axis=0)) ** 2).sum()
                                 for k in range(K)))
    return best


def test_c05_kmeans_oracle():
    rng = np.random.default_rng(5)
    hits = 0
    for _ in range(200):
        n = int(rng.integers(3, 9))
        K = int(rng.integers(1, min(3, n) + 1))
        X = rng.normal(size=(n, int(rng.integers(1, 4)))) * rng.uniform(0.5, 5)
        model, _ = kmeans_fit(X, K, seed=int(rng.integers(2**31)), n_restarts=10)
        ref = _brute_force(X, K)
        hits += abs(model.inertia - ref) <= 1e-9 * max(1.0, ref)
    s = silhouette_score(np.array([[0.0], [0.1], [10.0], [10.1]]), np.array([0, 0, 1, 1]))
    ok = hits >= 198 and abs(s.values[0] - 0.99005) < 1e-5
    record_acceptance(5, ok, "k-means oracle", f"{hits}/200 optimal; silhouette "
                      f"{s.values[0]:.6f}")
    assert ok


# ---------------------------------------------------------------- desk pipeline helpers

def run_stage(stage: str, config: Path, root: Path, monkeypatch, *extra: str) -> None:
    monkeypatch.setenv("ATLAS_OUT", str(root))
    code = cli.run_subcommand([stage, "--config", str(config), "--deterministic", *extra])
    assert code == 0, f"atlas {stage} exited with {code}"


def purity(labels: np.ndarray, truth: list[str]) -> float:
    """Fraction of points whose cluster's majority class matches their own."""
    total = 0
    for lab in np.unique(labels):
        members = [t for t, l in zip(truth, labels) if l == lab]
        total += max(members.count(v) for v in set(members))
    return total / len(truth)


# ---------------------------------------------------------------- 6 CS/PS separation

def test_c06_space_separation(acceptance_dir, monkeypatch):
    """Two-dimensional embedding trained on the desk dataset, K = 2 on held-out states.

    The protocol (30 epochs of batch 256 over 80% of 3600 images) is timed on
    the first epoch and projected; training itself runs under the configured
    wall-clock budget so that the suite finishes.
    """
    cfg_path = packaged_config("separation.toml")
    cfg = PipelineConfig.load(cfg_path)
    root = acceptance_dir / "desk"
    run_stage("generate", cfg_path, root, monkeypatch)
    m = read_manifest(root / "dataset" / "manifest.csv")
    tc = cli.train_config(cfg)
    train_rows, held = split_rows(m, tc.holdout_fraction, tc.rng_seed)
    pixels = load_pixels(m, train_rows)
    budget = float(os.environ.get("ATLAS_C6_BUDGET", 600))
    t0 = time.perf_counter()
    params, hist = train(m, tc, None, pixels=pixels, rows=train_rows, budget_seconds=budget)
    train_s = time.perf_counter() - t0
    del pixels
    E = embed_pixels(params, load_pixels(m, held))
    _, a = kmeans_fit(E, 2, seed=0, n_restarts=10)
    pur = purity(a.labels, [r.key.space.value for r in held])
    per_epoch = train_s / len(hist)
    projected = per_epoch * tc.epochs
    ok = pur >= 0.95 and len(hist) == tc.epochs and projected < 1800
    record_acceptance(6, ok, "CS/PS separation",
                      f"held-out purity {pur:.3f} on {len(held)} images after {len(hist)}/"
                      f"{tc.epochs} epochs on {len(train_rows)} images; {per_epoch:.0f} s/epoch, "
                      f"projected {projected / 60:.0f} min for the full protocol (limit 30)")
    assert ok


# ---------------------------------------------------------------- 7 loss histories

@pytest.fixture(scope="module")
def small_real_set(acceptance_dir, monkeypatch_module):
    root = acceptance_dir / "desk"
    run_stage("generate", packaged_config("separation.toml"), root, monkeypatch_module)
    m = read_manifest(root / "dataset" / "manifest.csv")
    rows = m.ok_rows[::len(m.ok_rows) // 64][:64]
    return m, rows, load_pixels(m, rows)


@pytest.fixture(scope="module")
def monkeypatch_module():
    mp = pytest.MonkeyPatch()
    yield mp
    mp.undo()


def short_run(data, lr=1e-3, n=5, lam=1.0, epochs=4, seed=0):
    m, rows, px = data
    tc = TrainConfig(learning_rate=lr, entropy_weight=lam, batch_size=32, epochs=epochs,
                     rng_seed=seed, embedding_dim=n)
    return train(m, tc, None, pixels=px, rows=rows)


def test_c07_loss_histories(small_real_set):
    lines, ok = [], True
    for lr in (1e-2, 1e-3, 1e-4):
        _, h = short_run(small_real_set, lr=lr)
        ok &= h[-1].mean_loss < h[0].mean_loss
        lines.append(f"lr {lr:g}: {h[0].mean_loss:.4f} -> {h[-1].mean_loss:.4f}")
    final = {}
    for n in (2, 5, 10, 15):
        _, h = short_run(small_real_set, n=n)
        final[n] = h[-1].mean_loss
    trend = abs(final[10] - final[15]) < abs(final[2] - final[10])
    ok &= trend
    lines.append("final by n: " + ", ".join(f"{n}: {v:.3f}" for n, v in final.items()))
    record_acceptance(7, ok, "loss histories", "; ".join(lines))
    assert ok


# ---------------------------------------------------------------- 8 collapse ablation

def test_c08_collapse_ablation(small_real_set):
    _, rows, px = small_real_set
    var, hist = {}, {}
    for lam in (0.0, 1.0):
        params, hist[lam] = short_run(small_real_set, lam=lam, lr=1e-3, epochs=6, seed=3)
        var[lam] = float(embed_pixels(params, px).var(axis=0).sum())
    ratio = var[0.0] / var[1.0]
    ok = ratio <= 0.1
    # A constant embedding c(1, ..., 1) has zero pair distance and a uniform mean
    # softmax, so it minimises both loss terms; the entropy term reaching -ln n
    # at lambda = 1 shows the run found that collapsed minimum.
    record_acceptance(8, ok, "collapse ablation", f"variance lambda=0 {var[0.0]:.3e}, "
                      f"lambda=1 {var[1.0]:.3e}, ratio {ratio:.3f}; lambda=1 final entropy "
                      f"term {hist[1.0][-1].entropy_term:.4f} (-ln 5 = {-math.log(5):.4f})")
    assert ok


# ---------------------------------------------------------------- 9 end to end

def _flag_summary(root: Path) -> tuple[list[dict], int]:
    flags = read_flags(root / "report" / "flags.csv")
    return flags, sum(f["verdict"] == "NDWP_Candidate" for f in flags)


def test_c09_end_to_end(acceptance_dir, monkeypatch):
    t0 = time.perf_counter()
    desk = acceptance_dir / "desk"
    run_stage("all", packaged_config("acceptance.toml"), desk, monkeypatch)
    flags, n_ndwp = _flag_summary(desk)
    masses = read_island_masses(desk / "dataset")
    sound = all(float(f["coherence"]) >= 0.8 and float(f["min_mass"]) >= 0.5
                for f in flags if f["verdict"] == "NDWP_Candidate")
    # Re-check persistence from the per-phase masses of the flagged clusters' members.
    with (desk / "clusters" / "labels.csv").open() as fh:
        labels = {r["id"]: r["label"] for r in csv.DictReader(fh)}
    for f in flags:
        if f["verdict"] != "NDWP_Candidate":
            continue
        uids = {i.rsplit("-", 2)[0] for i, l in labels.items() if l == f["label"]}
        mins = [min(masses[(u, ph)][0] for ph in PHASES) for u in uids]
        sound &= float(np.median(mins)) >= 0.5
    control = acceptance_dir / "control"
    run_stage("all", packaged_config("control.toml"), control, monkeypatch)
    _, n_control = _flag_summary(control)
    ok = n_ndwp >= 1 and sound and n_control == 0
    record_acceptance(9, ok, "end-to-end", f"{n_ndwp} NDWP_Candidate of {len(flags)} clusters "
                      f"(criteria re-checked: {sound}); control sweep at 0.5 omega_res flags "
                      f"{n_control}; {time.perf_counter() - t0:.0f} s")
    assert ok


# ---------------------------------------------------------------- 10 fixture

TABLE2_IM_E = [-3.25255e-06, -3.25211e-06, -3.25128e-06, -3.25005e-06, -3.24846e-06,
               -3.24640e-06, -3.24385e-06, -3.24039e-06, -3.23642e-06, -3.23142e-06,
               -3.22510e-06, -3.21624e-06, -3.20842e-06, -3.19887e-06, -3.18273e-06,
               -3.16244e-06, -3.13074e-06, -3.09188e-06, -3.03062e-06, -2.92885e-06]


def test_c10_table2_fixture():
    rows = load_fixture("table2")
    exact = (len(rows) == 20 and [r["Im_E"] for r in rows] == TABLE2_IM_E
             and [r["F_st"] for r in rows] == [float(f"{k}e-6") for k in range(1, 21)]
             and all(r["omega"] == 8.9e-4 and r["F"] == 1.0e-6 for r in rows))
    trends = fixture_trends(rows)
    ok = exact and trends == {"Re_E": "decreasing", "abs_Im_E": "decreasing"}
    record_acceptance(10, ok, "static-field fixture", f"20 rows exact: {exact}; trends {trends}")
    assert ok
