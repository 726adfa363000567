"""CNN embedding map: architecture descriptor, parameters, forward pass and loss.

Convolution, pooling and reverse-mode differentiation run on torch CPU tensors in
float64; parameters live as numpy arrays and are wrapped without copying.  A
plain numpy forward (``forward_reference``) serves as an independent check.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as tF

DTYPE = torch.float64


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str                      # "conv", "pool", "fc"
    out: int = 0                   # channels (conv) or features (fc)
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    relu: bool = True

    @property
    def name_prefix(self) -> str:
        return self.kind


@dataclass(frozen=True)
class Descriptor:
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    embedding_dim: int

    def __post_init__(self) -> None:
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        if self.layers[-1].kind != "fc" or self.layers[-1].out != self.embedding_dim:
            raise ValueError("last layer must be fc with embedding_dim outputs")

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in declaration order."""
        c, h, w = self.input_shape
        flat = None
        out, n_conv, n_fc = [], 0, 0
        for L in self.layers:
            if L.kind == "conv":
                n_conv += 1
                out.append((f"conv{n_conv}.weight", (L.out, c, L.kernel, L.kernel)))
                out.append((f"conv{n_conv}.bias", (L.out,)))
                c = L.out
                h = (h + 2 * L.padding - L.kernel) // L.stride + 1
                w = (w + 2 * L.padding - L.kernel) // L.stride + 1
            elif L.kind == "pool":
                h = (h - L.kernel) // L.stride + 1
                w = (w - L.kernel) // L.stride + 1
            elif L.kind == "fc":
                n_fc += 1
                fan_in = c * h * w if flat is None else flat
                out.append((f"fc{n_fc}.weight", (L.out, fan_in)))
                out.append((f"fc{n_fc}.bias", (L.out,)))
                flat = L.out
            else:
                raise ValueError(f"unknown layer kind {L.kind!r}")
            if min(h, w) < 1:
                raise ValueError("descriptor shrinks the image below one pixel")
        return out

    def spatial_trace(self) -> list[int]:
        _, h, _ = self.input_shape
        trace = [h]
        for L in self.layers:
            if L.kind == "conv":
                h = (h + 2 * L.padding - L.kernel) // L.stride + 1
            elif L.kind == "pool":
                h = (h - L.kernel) // L.stride + 1
            else:
                continue
            trace.append(h)
        return trace

    def to_json(self) -> dict:
        return {"input_shape": list(self.input_shape), "embedding_dim": self.embedding_dim,
                "layers": [asdict(L) for L in self.layers]}

    @classmethod
    def from_json(cls, d: dict) -> Descriptor:
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**L) for L in d["layers"]),
                   int(d["embedding_dim"]))


def default_descriptor(embedding_dim: int = 5, hidden: int = 128,
                       channels: tuple[int, int, int] = (16, 32, 64)) -> Descriptor:
    c1, c2, c3 = channels
    return Descriptor((3, 150, 150), (
        LayerSpec("conv", c1, 5, 1, 0),
        LayerSpec("pool", 0, 2, 2),
        LayerSpec("conv", c2, 5, 1, 0),
        LayerSpec("pool", 0, 2, 2),
        LayerSpec("conv", c3, 2, 2, 1),
        LayerSpec("fc", hidden, relu=True),
        LayerSpec("fc", embedding_dim, relu=False),
    ), embedding_dim)


def reduced_descriptor(embedding_dim: int = 5) -> Descriptor:
    """Same layer family on a 3x20x20 input, small enough for finite differences."""
    return Descriptor((3, 20, 20), (
        LayerSpec("conv", 4, 5, 1, 0),
        LayerSpec("pool", 0, 2, 2),
        LayerSpec("conv", 6, 3, 1, 0),
        LayerSpec("pool", 0, 2, 2),
        LayerSpec("conv", 8, 2, 2, 1),
        LayerSpec("fc", 8, relu=True),
        LayerSpec("fc", embedding_dim, relu=False),
    ), embedding_dim)


@dataclass
class ModelParams:
    descriptor: Descriptor
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def embedding_dim(self) -> int:
        return self.descriptor.embedding_dim

    def copy(self) -> ModelParams:
        return ModelParams(self.descriptor, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


def fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    return shape[1], shape[0]


def init_params(descriptor: Descriptor, seed: int) -> ModelParams:
    """Weights uniform in +-sqrt(6/(fan_in+fan_out)); biases zero."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in descriptor.shapes():
        if name.endswith(".weight"):
            fi, fo = fans(shape)
            lim = math.sqrt(6.0 / (fi + fo))
            arrays[name] = rng.uniform(-lim, lim, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(descriptor, arrays)


def zero_params(descriptor: Descriptor) -> ModelParams:
    return ModelParams(descriptor, {n: np.zeros(s) for n, s in descriptor.shapes()})


# ---------------------------------------------------------------- elementwise ops

def relu(t: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(t, dtype=float), 0.0)


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- forward

def _as_input(images) -> torch.Tensor:
    x = images if isinstance(images, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(images))
    if x.dtype == torch.uint8:
        x = x.to(DTYPE) / 255.0
    return x.to(DTYPE)


def torch_forward(tensors: dict[str, torch.Tensor], descriptor: Descriptor,
                  x: torch.Tensor) -> torch.Tensor:
    h = x
    n_conv = n_fc = 0
    for L in descriptor.layers:
        if L.kind == "conv":
            n_conv += 1
            h = tF.conv2d(h, tensors[f"conv{n_conv}.weight"], tensors[f"conv{n_conv}.bias"],
                          stride=L.stride, padding=L.padding)
            h = tF.relu(h) if L.relu else h
        elif L.kind == "pool":
            h = tF.max_pool2d(h, L.kernel, L.stride)
        else:
            n_fc += 1
            if h.dim() > 2:
                h = h.flatten(1)
            h = tF.linear(h, tensors[f"fc{n_fc}.weight"], tensors[f"fc{n_fc}.bias"])
            h = tF.relu(h) if L.relu else h
    return h


def _tensors(params: ModelParams, grad: bool = False) -> dict[str, torch.Tensor]:
    out = {}
    for k, v in params.arrays.items():
        t = torch.from_numpy(v)
        if grad:
            t = t.detach().clone().requires_grad_(True)
        out[k] = t
    return out


def forward(params: ModelParams, images) -> np.ndarray:
    """Pre-softmax embeddings of a batch (N, C, H, W) or a single image (C, H, W)."""
    x = _as_input(images)
    single = x.dim() == 3
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != tuple(params.descriptor.input_shape):
        raise ValueError(f"image shape {tuple(x.shape[1:])} does not match descriptor "
                         f"{params.descriptor.input_shape}")
    with torch.no_grad():
        e = torch_forward(_tensors(params), params.descriptor, x).numpy().copy()
    if not np.all(np.isfinite(e)):
        raise NonFiniteError("non-finite embedding")
    return e[0] if single else e


def forward_reference(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Single-image forward pass in plain numpy (independent of torch)."""
    image = np.asarray(image)
    h = image / 255.0 if image.dtype == np.uint8 else image.astype(float)
    n_conv = n_fc = 0
    for L in params.descriptor.layers:
        if L.kind == "conv":
            n_conv += 1
            W = params.arrays[f"conv{n_conv}.weight"]
            b = params.arrays[f"conv{n_conv}.bias"]
            hp = np.pad(h, ((0, 0), (L.padding, L.padding), (L.padding, L.padding)))
            win = np.lib.stride_tricks.sliding_window_view(hp, (L.kernel, L.kernel), axis=(1, 2))
            win = win[:, ::L.stride, ::L.stride]
            h = np.einsum("chwij,ocij->ohw", win, W) + b[:, None, None]
            h = relu(h) if L.relu else h
        elif L.kind == "pool":
            win = np.lib.stride_tricks.sliding_window_view(h, (L.kernel, L.kernel), axis=(1, 2))
            h = win[:, ::L.stride, ::L.stride].max(axis=(-2, -1))
        else:
            n_fc += 1
            h = h.reshape(-1)
            h = params.arrays[f"fc{n_fc}.weight"] @ h + params.arrays[f"fc{n_fc}.bias"]
            h = relu(h) if L.relu else h
    return h


# ---------------------------------------------------------------- loss

@dataclass
class LossParts:
    total: float
    consistency: float
    entropy: float
    n_pairs: int


def _pair_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Euclidean distance per row, exactly 0 with zero gradient when a == b."""
    sq = ((a - b) ** 2).sum(dim=1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def loss_terms(e_orig: torch.Tensor, e_aug: torch.Tensor, lam: float):
    consistency = _pair_distance(e_orig, e_aug).sum()
    phi = torch.softmax(e_orig, dim=1).mean(dim=0)
    entropy = lam * torch.xlogy(phi, phi).sum()
    return consistency + entropy, consistency, entropy


def _check_batch(originals, augmented) -> None:
    if len(originals) == 0:
        raise ValueError("empty batch")
    if len(originals) != len(augmented):
        raise ValueError("originals and augmented copies must pair up")


def batch_loss(params: ModelParams, originals, augmented, lam: float) -> LossParts:
    """Consistency (sum of pair distances) plus lam * sum_c phi_c ln phi_c."""
    _check_batch(originals, augmented)
    with torch.no_grad():
        t = _tensors(params)
        e1 = torch_forward(t, params.descriptor, _as_input(originals))
        e2 = torch_forward(t, params.descriptor, _as_input(augmented))
        total, c, h = loss_terms(e1, e2, lam)
    return LossParts(float(total), float(c), float(h), len(originals))


def loss_from_embeddings(e_orig: np.ndarray, e_aug: np.ndarray, lam: float) -> LossParts:
    total, c, h = loss_terms(torch.from_numpy(np.asarray(e_orig, float)),
                             torch.from_numpy(np.asarray(e_aug, float)), lam)
    return LossParts(float(total), float(c), float(h), len(e_orig))


def gradients(params: ModelParams, originals, augmented, lam: float,
              terms: str = "total", chunk: int = 64) -> tuple[dict[str, np.ndarray], LossParts]:
    """Exact reverse-mode gradients of ``batch_loss`` w.r.t. every parameter.

    ``terms`` selects "total", "consistency" or "entropy" for diagnostics.
    Batches with more than ``chunk`` images in total are processed in two
    passes to bound memory: embeddings first, then the loss gradient with
    respect to the embeddings is pulled back through the network chunk by chunk.
    """
    _check_batch(originals, augmented)
    t = _tensors(params, grad=True)
    n = len(originals)
    if 2 * n <= chunk:
        x = torch.cat([_as_input(originals), _as_input(augmented)])
        e = torch_forward(t, params.descriptor, x)
        total, c, h = loss_terms(e[:n], e[n:], lam)
        target = {"total": total, "consistency": c, "entropy": h}[terms]
        if not torch.isfinite(total):
            raise NonFiniteError("non-finite loss")
        target.backward()
    else:
        parts = (originals, augmented)
        with torch.no_grad():
            es = [torch.cat([torch_forward(t, params.descriptor, _as_input(imgs[i:i + chunk]))
                             for i in range(0, n, chunk)]).requires_grad_(True) for imgs in parts]
        total, c, h = loss_terms(es[0], es[1], lam)
        target = {"total": total, "consistency": c, "entropy": h}[terms]
        if not torch.isfinite(total):
            raise NonFiniteError("non-finite loss")
        target.backward()
        for imgs, e in zip(parts, es):
            if e.grad is None:          # term does not depend on this half
                continue
            for i in range(0, n, chunk):
                out = torch_forward(t, params.descriptor, _as_input(imgs[i:i + chunk]))
                out.backward(e.grad[i:i + chunk])
    grads = {}
    for k, v in t.items():
        g = v.grad.numpy().copy() if v.grad is not None else np.zeros(v.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in layer {k}")
        grads[k] = g
    return grads, LossParts(total.item(), c.item(), h.item(), n)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> AdamState:
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[ModelParams, AdamState]:
    """Adam with bias correction; returns new params and state (inputs untouched)."""
    t = state.t + 1
    new_arrays, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.arrays.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_arrays[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[k], v_new[k] = m, v
    return ModelParams(params.descriptor, new_arrays), AdamState(m_new, v_new, t)
