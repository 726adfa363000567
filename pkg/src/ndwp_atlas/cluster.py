"""K-means with k-means++ seeding, silhouette model selection and PCA projection."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

MAX_ITER = 500
TOL = 1e-8


@dataclass
class ClusterModel:
    centroids: np.ndarray          # (K, n)
    inertia: float
    iterations_used: int
    seed: int
    inertia_trace: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.centroids)


@dataclass
class Assignment:
    labels: np.ndarray
    keys: list | None = None

    def sizes(self, K: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=K)


@dataclass
class SilhouetteReport:
    values: np.ndarray
    mean: float
    table: list[tuple[int, float, int]] = field(default_factory=list)   # (K, mean, min size)
    recommended: int | None = None


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeanspp(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[idx]).min(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            j = int(rng.choice(n, p=d2 / total))
        else:
            j = int(rng.integers(n))
        idx.append(j)
        d2 = np.minimum(d2, _sq_dists(points, points[[j]])[:, 0])
    return points[idx].copy()


def _repair_empty(points, centroids, labels, d2):
    """Move each empty cluster's centroid onto the point farthest from its own centroid."""
    K = len(centroids)
    counts = np.bincount(labels, minlength=K)
    for j in np.nonzero(counts == 0)[0]:
        own = d2[np.arange(len(points)), labels].copy()
        own[counts[labels] <= 1] = -1.0     # do not empty another cluster
        i = int(np.argmax(own))
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] = 1
        centroids[j] = points[i]
    return centroids, labels


def _lloyd(points, centroids, tol, max_iter):
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(points, centroids)
        labels = np.argmin(d2, axis=1)
        centroids, labels = _repair_empty(points, centroids, labels, d2)
        trace.append(float(_sq_dists(points, centroids)[np.arange(len(points)), labels].sum()))
        new = np.array([points[labels == j].mean(axis=0) for j in range(len(centroids))])
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(points, centroids)
    labels = np.argmin(d2, axis=1)
    centroids, labels = _repair_empty(points, centroids, labels, d2)
    inertia = float(_sq_dists(points, centroids)[np.arange(len(points)), labels].sum())
    trace.append(inertia)
    return centroids, labels, inertia, it, trace


def _hartigan(points, labels, K, max_passes=50):
    """Single-point moves that lower the inertia (Hartigan's exchange criterion).

    Moving x from cluster a (size n_a) to b changes the inertia by
    n_b/(n_b+1)|x-c_b|^2 - n_a/(n_a-1)|x-c_a|^2.  A partition with no improving
    move is also a Lloyd fixed point, so this only escapes Lloyd's local minima.
    """
    labels = labels.copy()
    counts = np.bincount(labels, minlength=K).astype(float)
    cents = np.array([points[labels == j].mean(axis=0) for j in range(K)])
    rows = np.arange(len(points))
    for _ in range(max_passes):
        # Screen all points against the current centroids; only candidates are visited.
        d_all = _sq_dists(points, cents)
        leave_all = np.where(counts[labels] > 1,
                             counts[labels] / np.maximum(counts[labels] - 1, 1), np.nan) \
            * d_all[rows, labels]
        join_all = counts / (counts + 1) * d_all
        join_all[rows, labels] = np.inf
        cand = np.nonzero(join_all.min(axis=1) < leave_all - 1e-12 * np.maximum(1.0, leave_all))[0]
        moved = False
        for i in cand:
            a = labels[i]
            if counts[a] <= 1:
                continue
            d = ((points[i] - cents) ** 2).sum(axis=1)
            leave = counts[a] / (counts[a] - 1) * d[a]
            join = counts / (counts + 1) * d
            join[a] = np.inf
            b = int(np.argmin(join))
            if join[b] < leave - 1e-12 * max(1.0, leave):
                cents[a] = (cents[a] * counts[a] - points[i]) / (counts[a] - 1)
                cents[b] = (cents[b] * counts[b] + points[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moved = True
        if not moved:
            break
    return np.array([points[labels == j].mean(axis=0) for j in range(K)])


def kmeans_fit(points, K: int, eps: float = TOL, seed: int = 0, n_restarts: int = 10,
               max_iter: int = MAX_ITER, keys=None) -> tuple[ClusterModel, Assignment]:
    """Best-of-``n_restarts`` Lloyd iterations from k-means++ seeds.

    Each converged Lloyd solution is refined by Hartigan moves and polished by
    a final Lloyd pass; the recorded inertia trace stays non-increasing.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim != 2:
        raise ValueError("points must be a 2D array")
    if not np.all(np.isfinite(X)):
        raise ValueError("points must be finite")
    if K < 1 or K > len(X):
        raise ValueError(f"K={K} must lie in [1, {len(X)}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_restarts)):
        c0 = _kmeanspp(X, K, rng)
        c, labels, inertia, it, trace = _lloyd(X, c0, eps, max_iter)
        if K > 1:
            c, labels, inertia, it2, trace2 = _lloyd(X, _hartigan(X, labels, K), eps, max_iter)
            it, trace = it + it2, trace + trace2
        if best is None or inertia < best[2] - 1e-12 * max(1.0, abs(best[2])):
            best = (c, labels, inertia, it, trace)
    c, labels, inertia, it, trace = best
    return ClusterModel(c, inertia, it, seed, trace), Assignment(labels, keys)


def assign(model: ClusterModel, points, keys=None) -> Assignment:
    """Nearest-centroid labels; ties go to the lowest index."""
    X = np.asarray(points, dtype=float)
    if X.shape[1] != model.centroids.shape[1]:
        raise ValueError("dimension mismatch")
    return Assignment(np.argmin(_sq_dists(X, model.centroids), axis=1), keys)


def silhouette_score(points, labels) -> SilhouetteReport:
    X = np.asarray(points, dtype=float)
    labels = np.asarray(getattr(labels, "labels", labels))
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two clusters")
    D = cdist(X, X)
    s = np.zeros(len(X))
    members = {k: np.nonzero(labels == k)[0] for k in uniq}
    mean_to = np.stack([D[:, members[k]].mean(axis=1) for k in uniq], axis=1)   # (N, K)
    col = {k: j for j, k in enumerate(uniq)}
    for i in range(len(X)):
        own = members[labels[i]]
        if len(own) == 1:
            continue
        a = D[i, own].sum() / (len(own) - 1)
        others = np.delete(mean_to[i], col[labels[i]])
        b = others.min()
        den = max(a, b)
        s[i] = 0.0 if den == 0 else (b - a) / den
    return SilhouetteReport(s, float(s.mean()))


def select_k(points, k_range, seed: int = 0, n_restarts: int = 10, eps: float = TOL,
             max_iter: int = MAX_ITER) -> SilhouetteReport:
    """Fit every K in ``k_range``; recommend the best mean silhouette (ties to smaller K)."""
    X = np.asarray(points, dtype=float)
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("empty K range")
    if ks[0] < 2 or ks[-1] > len(X) - 1:
        raise ValueError(f"K range must lie within [2, {len(X) - 1}]")
    table = []
    best_k, best_s, best_vals = None, -np.inf, None
    for k in ks:
        model, a = kmeans_fit(X, k, eps, seed, n_restarts, max_iter)
        sizes = a.sizes(k)
        rep = silhouette_score(X, a.labels)
        table.append((k, rep.mean, int(sizes.min())))
        if sizes.min() > 0 and rep.mean > best_s:
            best_k, best_s, best_vals = k, rep.mean, rep.values
    return SilhouetteReport(best_vals, float(best_s), table, best_k)


def pca_project(points, out_dims: int = 2):
    """Project onto the leading principal axes.

    Returns (projected, explained variance ratios, components).  Each component's
    largest-magnitude entry is made positive.
    """
    X = np.asarray(points, dtype=float)
    if len(X) < 2:
        raise ValueError("PCA needs at least two points")
    if out_dims > X.shape[1]:
        raise ValueError("out_dims exceeds the input dimension")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (len(X) - 1)
    w, V = np.linalg.eigh(C)
    order = np.argsort(w)[::-1]
    w, V = np.clip(w[order], 0.0, None), V[:, order]
    for j in range(V.shape[1]):
        if V[np.argmax(np.abs(V[:, j])), j] < 0:
            V[:, j] = -V[:, j]
    total = w.sum()
    ratios = w / total if total > 0 else np.zeros_like(w)
    comps = V[:, :out_dims]
    return Xc @ comps, ratios[:out_dims], comps


# ---------------------------------------------------------------- CSV outputs

def _write(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_labels(path, ids, labels) -> None:
    _write(path, ["id", "label"], [[i, str(l)] for i, l in zip(ids, labels)])


def read_labels(path) -> dict[str, str]:
    with Path(path).open() as fh:
        rd = csv.reader(fh)
        next(rd)
        return {r[0]: r[1] for r in rd}


def write_silhouette_table(path, report: SilhouetteReport) -> None:
    _write(path, ["K", "mean_silhouette", "min_cluster_size"],
           [[k, repr(s), m] for k, s, m in report.table])


def write_pca(path, ids, projected) -> None:
    n = projected.shape[1]
    _write(path, ["id", *[f"pc{i + 1}" for i in range(n)]],
           [[i, *map(repr, map(float, row))] for i, row in zip(ids, projected)])
