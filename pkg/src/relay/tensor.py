"""Dense-tensor numeric core: float64 arrays, reverse-mode automatic
differentiation, optimizers, a seedable RNG with snapshot/restore, and a
deterministic parameter record format.

The op set is exactly what the encoders and heads in this package need.
Every op records a backward rule on the output tensor; ``backward`` walks
the recorded graph once in reverse topological order and accumulates (+=)
into the ``grad`` buffer of every reachable parameter.
"""

from __future__ import annotations

import copy
import hashlib
import io
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "RngState",
    "seed_rng",
    "backward",
    "matmul",
    "add",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "embedding_gather",
    "mean_pool",
    "max_pool",
    "concat",
    "reshape",
    "reduce_sum",
    "dropout",
    "softmax_cross_entropy",
    "mse",
    "rnn_scan",
    "xavier_uniform",
    "Sgd",
    "AdamW",
    "make_optimizer",
    "serialize_records",
    "deserialize_records",
    "params_checksum",
]


class Tensor:
    """A float64 array plus the bookkeeping autodiff needs."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from a
    scalar loss.  Grads accumulate across calls until zeroed."""
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    # Topological order with parents before children, built iteratively.
    topo: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = on stack, 1 = done
    stack: list[Tensor] = [loss]
    while stack:
        node = stack[-1]
        nid = id(node)
        if state.get(nid) == 1:
            stack.pop()
            continue
        if nid in state:
            state[nid] = 1
            topo.append(node)
            stack.pop()
            continue
        state[nid] = 0
        for p in node._parents:
            if state.get(id(p)) != 1:
                stack.append(p)

    # A node is relevant if gradient flowing through it can reach a
    # requires_grad leaf.
    relevant: dict[int, bool] = {}
    for node in topo:
        relevant[id(node)] = node.requires_grad or any(relevant.get(id(p), False) for p in node._parents)
    if not relevant.get(id(loss), False):
        return

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None or not relevant[id(node)]:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not relevant.get(id(parent), False):
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg


# ---------------------------------------------------------------------------
# RNG


class RngState:
    """Single named generator behind dropout masks, parameter init, and
    batch sampling.  Snapshots restore the exact stream."""

    def __init__(self, seed: int):
        self.gen = np.random.Generator(np.random.PCG64(seed))

    def snapshot(self) -> dict:
        return copy.deepcopy(self.gen.bit_generator.state)

    def restore(self, state: dict) -> None:
        self.gen.bit_generator.state = copy.deepcopy(state)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape)

    def random(self, shape) -> np.ndarray:
        return self.gen.random(size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice(self, n: int, p: np.ndarray | None = None) -> int:
        return int(self.gen.choice(n, p=p))


def seed_rng(seed: int) -> RngState:
    return RngState(seed)


def xavier_uniform(rng: RngState, shape: tuple[int, int]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


# ---------------------------------------------------------------------------
# Ops


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b with a of rank >= 2 and b a matrix; leading dims of a batch."""
    if a.ndim < 2 or b.ndim != 2:
        raise ValueError(f"matmul expects a rank >= 2 and b rank 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g: np.ndarray):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gb = a2.T @ g2
        return ga, gb

    return Tensor(out, parents=(a, b), backward_fn=bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def bw(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, parents=(a, b), backward_fn=bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * c, parents=(a,), backward_fn=lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, parents=(a,), backward_fn=lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(out, parents=(a,), backward_fn=lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return Tensor(np.where(keep, a.data, 0.0), parents=(a,), backward_fn=lambda g: (g * keep,))


def embedding_gather(table: Tensor, indices: np.ndarray) -> Tensor:
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError("embedding index out of range")
    out = table.data[idx]

    def bw(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return Tensor(out, parents=(table,), backward_fn=bw)


def _check_mask(x: Tensor, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match {x.shape[:-1]}")
    if np.any(mask.sum(axis=-1) < 0.5):
        raise ValueError("pooling over a fully masked row")
    return mask


def mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean over the time axis of (B, T, D)."""
    mask = _check_mask(x, mask)
    denom = mask.sum(axis=1)
    out = (x.data * mask[:, :, None]).sum(axis=1) / denom[:, None]

    def bw(g: np.ndarray):
        return (g[:, None, :] * mask[:, :, None] / denom[:, None, None],)

    return Tensor(out, parents=(x,), backward_fn=bw)


def max_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Masked max over the time axis of (B, T, D)."""
    mask = _check_mask(x, mask)
    neg = np.where(mask[:, :, None] > 0.5, x.data, -np.inf)
    arg = neg.argmax(axis=1)  # (B, D), first maximum wins
    out = np.take_along_axis(neg, arg[:, None, :], axis=1)[:, 0, :]

    def bw(g: np.ndarray):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return Tensor(out, parents=(x,), backward_fn=bw)


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, parents=tuple(parts), backward_fn=bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor(out, parents=(a,), backward_fn=lambda g: (g.reshape(a.shape),))


def reduce_sum(a: Tensor) -> Tensor:
    return Tensor(a.data.sum(), parents=(a,), backward_fn=lambda g: (np.full_like(a.data, float(g)),))


def dropout(x: Tensor, p: float, rng: RngState, train: bool) -> Tensor:
    """Inverted-scaling dropout; exact identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor(x.data * keep, parents=(x,), backward_fn=lambda g: (g * keep,))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    logits is (N, K) or (B, T, K); with the latter, ``mask`` selects the
    positions that count.  The mean runs over unmasked positions.
    """
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if mask is None:
        mask = np.ones(labels.shape, dtype=np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != labels.shape:
            raise ValueError("mask shape does not match labels")
    count = mask.sum()
    if count < 0.5:
        raise ValueError("cross entropy over zero unmasked positions")
    safe_labels = np.where(mask > 0.5, labels, 0).astype(np.int64)
    if safe_labels.min() < 0 or safe_labels.max() >= k:
        raise ValueError("label out of range")

    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    expz = np.exp(z - zmax)
    sumexp = expz.sum(axis=-1, keepdims=True)
    log_probs = (z - zmax) - np.log(sumexp)
    picked = np.take_along_axis(log_probs, safe_labels[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def bw(g: np.ndarray):
        probs = expz / sumexp
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, safe_labels[..., None], 1.0, axis=-1)
        return ((probs - onehot) * mask[..., None] * (float(g) / count),)

    return Tensor(loss, parents=(logits,), backward_fn=bw)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError(f"target shape {target.shape} does not match prediction {pred.shape}")
    diff = pred.data - target
    n = max(diff.size, 1)
    loss = (diff * diff).sum() / n
    return Tensor(loss, parents=(pred,), backward_fn=lambda g: (2.0 * diff * (float(g) / n),))


def rnn_scan(
    x: Tensor,
    mask: np.ndarray,
    w_ih: Tensor,
    w_hh: Tensor,
    b: Tensor,
    reverse: bool = False,
) -> Tensor:
    """Vanilla tanh recurrence over (B, T, D) -> (B, T, H).

    States at masked positions are zero, so with right padding the reversed
    direction enters the real tokens with a clean zero state.
    """
    bsz, tlen, _ = x.shape
    h = w_hh.shape[0]
    mask = np.asarray(mask, dtype=np.float64)
    order = range(tlen - 1, -1, -1) if reverse else range(tlen)
    order = list(order)

    states = np.zeros((bsz, tlen, h), dtype=np.float64)
    raw = np.zeros((bsz, tlen, h), dtype=np.float64)  # tanh pre-mask, for backward
    h_prev = np.zeros((bsz, h), dtype=np.float64)
    prevs = np.zeros((bsz, tlen, h), dtype=np.float64)
    for t in order:
        prevs[:, t] = h_prev
        a = x.data[:, t] @ w_ih.data + h_prev @ w_hh.data + b.data
        th = np.tanh(a)
        raw[:, t] = th
        h_prev = th * mask[:, t, None]
        states[:, t] = h_prev

    def bw(g: np.ndarray):
        gx = np.zeros_like(x.data)
        g_wih = np.zeros_like(w_ih.data)
        g_whh = np.zeros_like(w_hh.data)
        g_b = np.zeros_like(b.data)
        carry = np.zeros((bsz, h), dtype=np.float64)
        for t in reversed(order):
            dh = g[:, t] + carry
            da = dh * mask[:, t, None] * (1.0 - raw[:, t] * raw[:, t])
            gx[:, t] = da @ w_ih.data.T
            g_wih += x.data[:, t].T @ da
            g_whh += prevs[:, t].T @ da
            g_b += da.sum(axis=0)
            carry = da @ w_hh.data.T
        return gx, g_wih, g_whh, g_b

    return Tensor(states, parents=(x, w_ih, w_hh, b), backward_fn=bw)


# ---------------------------------------------------------------------------
# Optimizers


class Sgd:
    kind = "sgd"

    def __init__(self):
        self.step_count = 0

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.step_count += 1
        for p in params.values():
            if p.grad is not None:
                p.data -= lr * p.grad

    def state_dict(self) -> dict:
        return {"kind": self.kind, "step_count": self.step_count, "slots": {}}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])


class AdamW:
    """Adam with bias correction, decoupled weight decay, and linear
    warmup of the effective learning rate over ``warmup_steps``."""

    kind = "adamw"

    def __init__(
        self,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        warmup_steps: int = 0,
    ):
        for beta in betas:
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.warmup_steps = int(warmup_steps)
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def effective_lr(self, lr: float, step: int) -> float:
        if self.warmup_steps > 0:
            return lr * min(1.0, step / self.warmup_steps)
        return lr

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        lr_eff = self.effective_lr(lr, t)
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1**t)
            vhat = v / (1.0 - b2**t)
            p.data -= lr_eff * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "step_count": self.step_count,
            "slots": {"m": self.m, "v": self.v},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        slots = state.get("slots", {})
        self.m = {k: np.array(v, dtype=np.float64) for k, v in slots.get("m", {}).items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in slots.get("v", {}).items()}


def make_optimizer(kind: str, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, warmup_steps=0):
    # bert_adam is the config-facing name for adamw with linear warmup
    if kind in ("adamw", "bert_adam"):
        return AdamW(betas=betas, eps=eps, weight_decay=weight_decay, warmup_steps=warmup_steps)
    if kind == "sgd":
        return Sgd()
    raise ValueError(f"unknown optimizer kind {kind!r}")


# ---------------------------------------------------------------------------
# Parameter serialization: named flat float64 records, versioned and
# checksummed; consumed by trainer checkpoints and the preprocessing cache.

_RECORDS_MAGIC = b"RLYREC01"


def serialize_records(records: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(_RECORDS_MAGIC)
    buf.write(struct.pack("<I", len(records)))
    for name in sorted(records):
        arr = np.asarray(records[name], dtype=np.float64)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(np.ascontiguousarray(arr).tobytes(order="C"))
    payload = buf.getvalue()
    return payload + hashlib.sha256(payload).digest()


def deserialize_records(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < len(_RECORDS_MAGIC) + 4 + 32:
        raise ValueError("record blob truncated")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ValueError("record blob checksum mismatch")
    if not payload.startswith(_RECORDS_MAGIC):
        raise ValueError("bad record blob magic")
    view = io.BytesIO(payload[len(_RECORDS_MAGIC) :])
    (count,) = struct.unpack("<I", view.read(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", view.read(2))
        name = view.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", view.read(1))
        shape = tuple(struct.unpack("<I", view.read(4))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(view.read(size * 8), dtype="<f8").reshape(shape)
        out[name] = np.array(data, dtype=np.float64)
    return out


def params_checksum(params: dict[str, Tensor] | dict[str, np.ndarray]) -> str:
    records = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    return hashlib.sha256(serialize_records(records)).hexdigest()
