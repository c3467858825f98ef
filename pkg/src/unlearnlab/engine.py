"""Float64 reverse-mode tensor engine.

Thin, validating layer over torch autograd. Every model and loss in the
package builds its graph through these ops so shape errors and non-finite
values surface at the op that produced them instead of deep inside a
training loop.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
LN_EPS = 1e-5

torch.set_default_dtype(DTYPE)


class EngineError(ValueError):
    pass


class ShapeError(EngineError):
    pass


class NonFiniteError(EngineError):
    pass


def configure_threads() -> None:
    """Cap intra-op threads from UNLEARNLAB_THREADS (default 1)."""
    n = int(os.environ.get("UNLEARNLAB_THREADS", "1"))
    torch.set_num_threads(max(1, n))


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE).clone()
    _require_finite("tensor", t)
    return t.requires_grad_(requires_grad)


def _require_finite(op: str, *ts: torch.Tensor) -> None:
    for t in ts:
        if t.is_floating_point() and not bool(torch.isfinite(t).all()):
            raise NonFiniteError(f"{op}: non-finite values in input of shape {tuple(t.shape)}")


def _broadcastable(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    for x, y in zip(reversed(a.shape), reversed(b.shape)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast")


# ---------------------------------------------------------------- forward ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not conform")
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcastable("add", a, b)
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _broadcastable("mul", a, b)
    return a * b


def softmax(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax over the last axis. ``mask`` marks allowed entries (True)."""
    _require_finite("softmax", x)
    if mask is not None:
        _broadcastable("softmax", x, mask)
        x = x.masked_fill(~mask, float("-inf"))
    return torch.softmax(x, dim=-1)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    _require_finite("log_softmax", x)
    return torch.log_softmax(x, dim=-1)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    # variance floored by eps; constant inputs map to zero before the affine part
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: input {tuple(x.shape)} vs gain {tuple(gain.shape)} / bias {tuple(bias.shape)}"
        )
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)  # exact erf form


def relu(x: torch.Tensor) -> torch.Tensor:
    """Clamp at zero."""
    return torch.clamp_min(x, 0.0)


def embedding(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {tuple(table.shape)}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise EngineError(f"embedding: token id out of range [0, {table.shape[0]})")
    return table[ids]


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of integer targets under ``logits`` (last axis)."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    lp = log_softmax(logits)
    return -lp.gather(-1, targets.unsqueeze(-1)).squeeze(-1).mean()


def l2_norm(x: torch.Tensor) -> torch.Tensor:
    # subgradient 0 at the origin (torch's vector_norm convention)
    return torch.linalg.vector_norm(x)


# ---------------------------------------------------------------- backward


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf; gradients accumulate."""
    if loss.dim() != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        raise EngineError("backward: loss is not attached to a graph")
    _require_finite("backward", loss)
    loss.backward()


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


def check_grads(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            _require_finite("grad", p.grad)


class ActivationCapture:
    """Opt-in registry of named activation sites.

    Sites must be registered before the forward pass; ``record`` is called by
    the model for every site it computes and keeps only registered ones.
    """

    def __init__(self, sites: Iterable = (), track_grad: bool = True):
        self.sites = set(sites)
        self.track_grad = track_grad
        self.values: dict = {}

    def register(self, site) -> None:
        self.sites.add(site)

    def wants(self, site) -> bool:
        return site in self.sites

    def record(self, site, value: torch.Tensor) -> torch.Tensor:
        if site in self.sites:
            if self.track_grad and not value.requires_grad:
                # graph starts here when parameters are frozen
                value = value.detach().requires_grad_(True)
            self.values[site] = value
        return value

    def __getitem__(self, site) -> torch.Tensor:
        return self.values[site]


def grad_wrt_activation(
    loss: torch.Tensor, capture: ActivationCapture, sites: Sequence, retain_graph: bool = False
) -> list[np.ndarray]:
    """d loss / d activation at every position of each captured site."""
    if loss.dim() != 0:
        raise ShapeError(f"grad_wrt_activation: loss must be scalar, got {tuple(loss.shape)}")
    missing = [s for s in sites if s not in capture.values]
    if missing:
        raise EngineError(f"activation site(s) not registered before forward: {missing}")
    grads = torch.autograd.grad(
        loss, [capture.values[s] for s in sites], retain_graph=retain_graph, allow_unused=True
    )
    out = []
    for s, g in zip(sites, grads):
        g = torch.zeros_like(capture.values[s]) if g is None else g
        _require_finite("grad_wrt_activation", g)
        out.append(g.detach().numpy().copy())
    return out


# ---------------------------------------------------------------- snapshot I/O
#
# layout: u32 rank | u64 dims[rank] | f64 values (C order), all little-endian


def write_tensor(f: BinaryIO, t: torch.Tensor | np.ndarray) -> None:
    arr = np.ascontiguousarray(t.detach().numpy() if isinstance(t, torch.Tensor) else t, dtype="<f8")
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_tensor(f: BinaryIO) -> torch.Tensor:
    head = f.read(4)
    if len(head) != 4:
        raise EngineError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = int(np.prod(dims)) if rank else 1
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise EngineError("truncated tensor payload")
    arr = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    return torch.from_numpy(arr.copy())


def tensor_bytes(t: torch.Tensor | np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()
