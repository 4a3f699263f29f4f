"""Differentiable operator set, SGD with momentum, EMA and checkpoint I/O.

Reverse-mode gradients come from torch autograd; the wrappers here pin the
operator inventory and turn shape problems into errors that name the operator.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

CKPT_MAGIC = b"C2FSCKPT"
CKPT_VERSION = 1


class ShapeError(ValueError):
    def __init__(self, op: str, a, b, detail: str = ""):
        msg = f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}"
        super().__init__(msg + (f" ({detail})" if detail else ""))
        self.op = op


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------- operators


def matmul(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("matmul", x.shape, w.shape)
    return x @ w


def dense(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``x @ weight.T + bias`` with torch's (out, in) weight layout."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("dense", x.shape, weight.shape)
    return F.linear(x, weight, bias)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    if x.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    if x.dim() != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError("conv_transpose2d", x.shape, weight.shape)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding,
                              output_padding=output_padding)


def relu(x):
    return F.relu(x)


def max_pool2d(x, kernel: int, stride: int | None = None):
    if x.dim() != 4 or min(x.shape[-2:]) < kernel:
        raise ShapeError("max_pool2d", x.shape, (kernel, kernel))
    return F.max_pool2d(x, kernel, stride)


def avg_pool2d(x, kernel: int, stride: int | None = None):
    if x.dim() != 4 or min(x.shape[-2:]) < kernel:
        raise ShapeError("avg_pool2d", x.shape, (kernel, kernel))
    return F.avg_pool2d(x, kernel, stride)


def global_avg_pool(x):
    if x.dim() != 4:
        raise ShapeError("global_avg_pool", x.shape, ("B", "C", "H", "W"))
    return x.mean(dim=(2, 3))


def concat_channels(tensors: Sequence[torch.Tensor]):
    ref = tensors[0]
    for t in tensors[1:]:
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ShapeError("concat_channels", ref.shape, t.shape)
    return torch.cat(list(tensors), dim=1)


def upsample_nearest(x, size):
    return F.interpolate(x, size=tuple(size), mode="nearest")


def l2_normalize(x, eps: float = 1e-12):
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def softmax_cross_entropy(logits, labels):
    if logits.dim() != 2 or labels.shape != logits.shape[:1]:
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    if labels.numel() and (int(labels.max()) >= logits.shape[1] or int(labels.min()) < 0):
        raise ValueError(
            f"softmax_cross_entropy: label {int(labels.max())} outside [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def mse(a, b):
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    return ((a - b) ** 2).mean()


def weighted_sum(terms: Sequence[torch.Tensor], weights: Sequence[float]):
    if len(terms) != len(weights):
        raise ShapeError("weighted_sum", (len(terms),), (len(weights),))
    out = terms[0] * weights[0]
    for t, w in zip(terms[1:], weights[1:]):
        if t.shape != terms[0].shape:
            raise ShapeError("weighted_sum", terms[0].shape, t.shape)
        out = out + t * w
    return out


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    schedule: list[tuple[int, float]] = field(default_factory=list)
    velocity: dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        epochs = [e for e, _ in self.schedule]
        if epochs != sorted(set(epochs)):
            raise ValueError("schedule epochs must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for e, mult in self.schedule:
            if epoch >= e:
                lr *= mult
        return lr


def sgd_step(params: Mapping[str, torch.nn.Parameter], opt: OptimizerState, epoch: int = 0) -> float:
    """``v <- momentum * v + grad; value <- value - lr * v``; gradients are then zeroed.

    Parameters without a gradient are skipped. Returns the learning rate used.
    """
    lr = opt.lr_at(epoch)
    for name, p in params.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in parameter {name!r}; step aborted")
    with torch.no_grad():
        for name, p in params.items():
            if p.grad is None:
                continue
            v = opt.velocity.get(name)
            if v is None:
                v = torch.zeros_like(p)
            elif v.shape != p.shape:
                raise ShapeError("sgd_step", v.shape, p.shape, name)
            v = v.mul_(opt.momentum).add_(p.grad)
            opt.velocity[name] = v
            p.sub_(lr * v)
            p.grad = None
    return lr


@torch.no_grad()
def ema_update(target: Iterable[torch.Tensor], source: Iterable[torch.Tensor], coeff: float) -> None:
    """``target <- coeff * target + (1 - coeff) * source`` elementwise, in place."""
    if not 0 <= coeff <= 1:
        raise ValueError("EMA coefficient must lie in [0, 1]")
    target, source = list(target), list(source)
    if len(target) != len(source):
        raise ShapeError("ema_update", (len(target),), (len(source),), "parameter count")
    for t, s in zip(target, source):
        if t.shape != s.shape:
            raise ShapeError("ema_update", t.shape, s.shape)
    for t, s in zip(target, source):
        t.mul_(coeff).add_(s, alpha=1.0 - coeff)


# ---------------------------------------------------------------- checkpoint


def save_tensors(path, tensors: Mapping[str, torch.Tensor]) -> None:
    """Write named tensors as float32 in the ``C2FSCKPT`` layout."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().to(torch.float32).contiguous().cpu().numpy()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict[str, torch.Tensor]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {buf[:8]!r})")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            name = buf[off + 4:off + 4 + n].decode("utf-8")
            off += 4 + n
            (rank,) = struct.unpack_from("<I", buf, off)
            dims = struct.unpack_from(f"<{rank}I", buf, off + 4)
            off += 4 + 4 * rank
            size = math.prod(dims)
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated checkpoint at byte {off}") from exc
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes after last tensor")
    return out
