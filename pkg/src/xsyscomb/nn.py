"""Layers, parameter containers, Adam and the binary checkpoint format."""
from __future__ import annotations

import json
import contextlib
import math
import struct
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import Stream

CKPT_MAGIC = b"XSCCKPT1"


class Module:
    """Parameter container; children and parameters are discovered in attribute order."""

    training: bool = False

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.extend(m.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for key, val in vars(self).items():
            if key.startswith("buf_"):
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_buffers(f"{prefix}{key}."))
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.extend(m.named_buffers(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for m in val:
                    yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ag.ShapeError(f"checkpoint shape {state[name].shape} != {p.shape} for {name}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, _ in self.named_buffers():
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.array(state[name], dtype=np.float64))

    def _resolve(self, dotted: str):
        obj = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
        return obj, parts[-1]


@contextlib.contextmanager
def frozen(model: Module):
    """Stop gradient tracking on every parameter of ``model`` (and restore training mode)."""
    params = model.parameters()
    was_training = model.training
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p in params:
            p.requires_grad = True
        model.train(was_training)


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, stream: Stream, bias: bool = True):
        self.weight = param(stream.normal((d_in, d_out), std=1.0 / math.sqrt(d_in)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


class BatchNorm(Module):
    """Batch statistics while training; frozen running statistics otherwise."""

    def __init__(self, dim: int, momentum: float = 0.1):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.momentum = momentum
        self.buf_mean = np.zeros(dim)
        self.buf_var = np.ones(dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if not self.training:
            return ag.batch_norm_eval(x, self.gamma, self.beta, self.buf_mean, self.buf_var)
        out, mu, var = ag.batch_norm_train(x, self.gamma, self.beta, mask)
        m = self.momentum
        self.buf_mean = (1 - m) * self.buf_mean + m * mu
        self.buf_var = (1 - m) * self.buf_var + m * var
        return out


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stream: Stream, stride: int = 1,
                 padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = param(stream.normal((c_out, c_in, kernel, kernel), std=math.sqrt(2.0 / fan_in)))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv1d(Module):
    def __init__(self, channels: int, kernel: int, stream: Stream):
        self.weight = param(stream.normal((kernel, channels), std=1.0 / math.sqrt(kernel)))
        self.bias = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.depthwise_conv1d(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, num: int, dim: int, stream: Stream):
        self.weight = param(stream.normal((num, dim), std=1.0))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ag.embedding(self.weight, ids)


def time_mask(lengths, T: int) -> np.ndarray:
    """(B, T, 1) float mask of valid frames."""
    lengths = np.asarray(lengths)
    return (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)[:, :, None]


def apply_lhuc(hidden: Tensor, r) -> Tensor:
    """Scale hidden units by 2 * sigmoid(r) along the last axis."""
    r = ag.as_tensor(r)
    if r.shape[-1] != hidden.shape[-1]:
        raise ag.ShapeError(f"lhuc: scaling width {r.shape} does not match hidden {hidden.shape}")
    return ag.mul(hidden, ag.mul(ag.sigmoid(r), 2.0))


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9,
                 clip: float | None = 5.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: ag.GradMap) -> float:
        gs = [grads.get(p, np.zeros_like(p.data)) for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in gs))
        if not math.isfinite(norm):
            raise ag.NonFiniteError("gradient norm is not finite")
        if self.clip is not None and norm > self.clip:
            gs = [g * (self.clip / norm) for g in gs]
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, gs)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
        return norm


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path, kind: str, config: dict, state: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    """Magic, u64 header length, JSON header, then little-endian float64 blobs."""
    names = sorted(state)
    entries = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {"kind": kind, "config": config, "tensors": entries, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(state[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    state = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        state[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=start).reshape(e["shape"]).astype(np.float64)
    return header, state
