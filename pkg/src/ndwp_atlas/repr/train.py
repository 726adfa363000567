"""Training loop, checkpoints and dataset embedding."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..dataset import (AugmentationSpec, DatasetManifest, ManifestRow, ParameterKey,
                       augment_pixels, draw_seed_for, load_pixels)
from .model import (AdamState, Descriptor, ModelParams, NonFiniteError, adam_step,
                    default_descriptor, forward, gradients, init_params)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_MAGIC = b"NDWPCKPT"
LOSS_HEADER = ["epoch", "mean_loss", "consistency_term", "entropy_term"]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    entropy_weight: float = 1.0
    batch_size: int = 256
    epochs: int = 30
    rng_seed: int = 0
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    embedding_dim: int = 5
    holdout_fraction: float = 0.0
    max_train_images: int = 0        # 0 = all training rows
    deterministic: bool = True
    config_hash: str = ""

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    consistency_term: float
    entropy_term: float


@dataclass
class EmbeddingVector:
    values: np.ndarray
    key: ParameterKey


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, params: ModelParams, state: AdamState | None = None,
                    *, epoch: int = 0, history: list[EpochRecord] | None = None,
                    config_hash: str = "", extra: dict | None = None) -> None:
    """JSON header, then little-endian float64 arrays in descriptor order.

    Layout: 8-byte magic, uint64 header length, UTF-8 JSON header, arrays
    (parameters, then Adam first moments, then second moments when present).
    """
    names = [n for n, _ in params.descriptor.shapes()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "descriptor": params.descriptor.to_json(),
        "embedding_dim": params.embedding_dim,
        "arrays": [[n, list(params.arrays[n].shape)] for n in names],
        "optimizer": None if state is None else {"kind": "adam", "step": state.t},
        "epoch": epoch,
        "history": [[r.epoch, r.mean_loss, r.consistency_term, r.entropy_term]
                    for r in (history or [])],
        "config_hash": config_hash,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        groups = [params.arrays] + ([] if state is None else [state.m, state.v])
        for g in groups:
            for n in names:
                fh.write(np.ascontiguousarray(g[n], dtype="<f8").tobytes())
    tmp.replace(path)


@dataclass
class Checkpoint:
    params: ModelParams
    state: AdamState | None
    epoch: int
    history: list[EpochRecord]
    config_hash: str
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['format_version']}")
    desc = Descriptor.from_json(header["descriptor"])
    off = 16 + hlen

    def read_group():
        nonlocal off
        out = {}
        for n, shape in header["arrays"]:
            size = int(np.prod(shape)) * 8
            out[n] = np.frombuffer(raw[off:off + size], dtype="<f8").reshape(shape).astype(float)
            off += size
        return out

    params = ModelParams(desc, read_group())
    state = None
    if header["optimizer"] is not None:
        m = read_group()
        v = read_group()
        state = AdamState(m, v, int(header["optimizer"]["step"]))
    history = [EpochRecord(int(r[0]), *map(float, r[1:])) for r in header["history"]]
    return Checkpoint(params, state, int(header["epoch"]), history, header["config_hash"],
                      header.get("extra", {}))


def write_loss_csv(path: str | Path, history: list[EpochRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_HEADER)
        for r in history:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.consistency_term), repr(r.entropy_term)])


# ---------------------------------------------------------------- splits

def split_rows(manifest: DatasetManifest, holdout_fraction: float, seed: int):
    """Split usable rows into (train, held-out), grouped by Floquet state."""
    rows = manifest.ok_rows
    if holdout_fraction <= 0:
        return rows, []
    uids = sorted({r.key.state_uid for r in rows})
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(uids))
    n_hold = max(1, int(round(holdout_fraction * len(uids))))
    held = {uids[i] for i in perm[:n_hold]}
    return ([r for r in rows if r.key.state_uid not in held],
            [r for r in rows if r.key.state_uid in held])


def _subsample(rows: list[ManifestRow], n: int, seed: int) -> list[ManifestRow]:
    if n <= 0 or n >= len(rows):
        return rows
    idx = np.sort(np.random.default_rng(seed).choice(len(rows), size=n, replace=False))
    return [rows[i] for i in idx]


def _set_threads(deterministic: bool) -> None:
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------- training

def train(manifest: DatasetManifest, config: TrainConfig, out_dir: str | Path | None = None,
          descriptor: Descriptor | None = None, *, pixels: np.ndarray | None = None,
          rows: list[ManifestRow] | None = None, resume: bool = True,
          budget_seconds: float | None = None, progress=None) -> tuple[ModelParams, list[EpochRecord]]:
    """Minimize consistency + entropy with Adam; checkpoint after every epoch.

    ``pixels``/``rows`` may be supplied to skip image loading (rows must align
    with pixels).  With ``budget_seconds`` training stops after the first epoch
    that exhausts the budget; the history then has fewer than ``epochs`` rows.
    """
    _set_threads(config.deterministic)
    if rows is None:
        train_rows, _ = split_rows(manifest, config.holdout_fraction, config.rng_seed)
        train_rows = _subsample(train_rows, config.max_train_images, config.rng_seed + 1)
    else:
        train_rows = rows
    if not train_rows:
        raise ValueError("manifest has no usable rows")
    if pixels is None:
        pixels = load_pixels(manifest, train_rows)
    descriptor = descriptor or default_descriptor(config.embedding_dim)
    if tuple(pixels.shape[1:]) != tuple(descriptor.input_shape):
        raise ValueError("image shape does not match descriptor")

    params = init_params(descriptor, config.rng_seed)
    state = AdamState.zeros(params)
    history: list[EpochRecord] = []
    start = 0
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.bin"
        if resume and ckpt_path.exists():
            ck = load_checkpoint(ckpt_path)
            if ck.config_hash == config.config_hash and ck.params.descriptor == descriptor:
                params, state, history, start = ck.params, ck.state, ck.history, ck.epoch
                log.info("resuming from epoch %d", start)

    n = len(pixels)
    aug = config.augmentation
    t_start = time.perf_counter()
    for epoch in range(start, config.epochs):
        rng = np.random.default_rng([config.rng_seed, epoch])
        order = rng.permutation(n)
        batches = [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]
        batches = [b for b in batches if len(b) >= 2]
        tot = con = ent = 0.0
        for b in batches:
            orig = pixels[b]
            augd = np.stack([augment_pixels(pixels[i], aug, draw_seed_for(epoch, int(i))) for i in b])
            try:
                grads, parts = gradients(params, orig, augd, config.entropy_weight)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}; last good checkpoint kept") from exc
            params, state = adam_step(params, grads, state, config.learning_rate,
                                      config.beta1, config.beta2, config.eps_adam)
            tot += parts.total
            con += parts.consistency
            ent += parts.entropy
        k = max(1, len(batches))
        rec = EpochRecord(epoch, tot / k, con / k, ent / k)
        if not np.isfinite(rec.mean_loss):
            raise TrainingDiverged(f"epoch {epoch}: non-finite loss; last good checkpoint kept")
        history.append(rec)
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, params, state, epoch=epoch + 1, history=history,
                            config_hash=config.config_hash)
            write_loss_csv(out_dir / "loss_history.csv", history)
        if progress:
            progress(rec)
        if budget_seconds is not None and time.perf_counter() - t_start > budget_seconds:
            break
    if ckpt_path is not None and not ckpt_path.exists():
        save_checkpoint(ckpt_path, params, state, epoch=0, history=history,
                        config_hash=config.config_hash)
        write_loss_csv(out_dir / "loss_history.csv", history)
    return params, history


def embed_pixels(params: ModelParams, pixels: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = np.empty((len(pixels), params.embedding_dim))
    for i in range(0, len(pixels), chunk):
        out[i:i + chunk] = forward(params, pixels[i:i + chunk])
    return out


def embed_dataset(params: ModelParams, manifest: DatasetManifest,
                  rows: list[ManifestRow] | None = None, chunk: int = 64) -> list[EmbeddingVector]:
    """Embeddings of the original images of every usable manifest row."""
    rows = manifest.ok_rows if rows is None else rows
    out = []
    for i in range(0, len(rows), chunk):
        part = rows[i:i + chunk]
        E = embed_pixels(params, load_pixels(manifest, part), chunk)
        out.extend(EmbeddingVector(e, r.key) for e, r in zip(E, part))
    return out


def write_embeddings(path: str | Path, vectors: list[EmbeddingVector], config_hash: str) -> None:
    n = len(vectors[0].values) if vectors else 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "space", *[f"e{i}" for i in range(n)], "config_hash"])
        for v in vectors:
            w.writerow([v.key.id, v.key.space.value, *map(repr, map(float, v.values)), config_hash])


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray, str]:
    with Path(path).open() as fh:
        rd = csv.reader(fh)
        header = next(rd)
        ids, vals, hashes = [], [], set()
        for rec in rd:
            ids.append(rec[0])
            vals.append([float(x) for x in rec[2:-1]])
            hashes.add(rec[-1])
    if len(hashes) > 1:
        raise ValueError(f"{path}: mixed config hashes {sorted(hashes)}")
    n = len(header) - 3
    return ids, np.array(vals, dtype=float).reshape(-1, n), (hashes.pop() if hashes else "")


def params_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for n, _ in params.descriptor.shapes():
        h.update(np.ascontiguousarray(params.arrays[n], dtype="<f8").tobytes())
    return h.hexdigest()[:16]
