"""Dense numeric kernel: forward/backward for the few ops the model uses,
Adam, a finite-difference gradient checker and the checkpoint format.

Every ``*_forward`` function returns ``(out, cache)``; the matching
``*_backward`` takes the upstream gradient and the cache, accumulates into
``ParamTensor.grad`` and returns the gradient with respect to its input.
Arrays may carry arbitrary leading batch dimensions; the last axis (or the
last two for matmul-like ops) is the one the op acts on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class ParamTensor:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self) -> None:
        if self.value.ndim != 2:
            raise DimensionError(f"parameters are 2-D, got shape {self.value.shape}")
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @classmethod
    def normal(cls, shape, rng: np.random.Generator, std: float = 0.01, dtype=np.float32):
        return cls(rng.normal(0.0, std, size=shape).astype(dtype))

    @classmethod
    def zeros(cls, shape, dtype=np.float32):
        return cls(np.zeros(shape, dtype=dtype))

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def astype(self, dtype) -> "ParamTensor":
        out = ParamTensor(self.value.astype(dtype))
        out.adam_m = self.adam_m.astype(dtype)
        out.adam_v = self.adam_v.astype(dtype)
        out.step_count = self.step_count
        return out


# ---------------------------------------------------------------- affine

def affine_forward(x: np.ndarray, w: ParamTensor, b: ParamTensor | None = None):
    if x.shape[-1] != w.value.shape[0]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {w.value.shape}")
    if b is not None and b.value.shape != (1, w.value.shape[1]):
        raise DimensionError(f"affine: bias {b.value.shape} incompatible with weight {w.value.shape}")
    out = x @ w.value
    if b is not None:
        out = out + b.value[0]
    return out, (x, w, b)


def affine_backward(dout: np.ndarray, cache) -> np.ndarray:
    x, w, b = cache
    k = x.shape[-1]
    w.grad += x.reshape(-1, k).T @ dout.reshape(-1, dout.shape[-1])
    if b is not None:
        b.grad[0] += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dout @ w.value.T


def affine(x: np.ndarray, w: ParamTensor, b: ParamTensor | None = None) -> np.ndarray:
    return affine_forward(x, w, b)[0]


# ---------------------------------------------------------------- elementwise

def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dout * y * (1.0 - y)


# ---------------------------------------------------------------- softmax

def softmax_rows(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable, True = keep) excludes entries; a row with no
    kept entries comes out all-zero. Denominators are summed in float64.
    """
    x = np.asarray(x)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    mx = np.max(x, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(x - mx)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    denom = np.where(denom > 0, denom, 1.0)
    return (e / denom).astype(x.dtype, copy=False)


def softmax_backward(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dout - np.sum(dout * y, axis=-1, keepdims=True))


# ---------------------------------------------------------------- optimizer

def adam_step(params: Iterable[ParamTensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    for p in params:
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (p.grad * p.grad)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
        p.zero_grad()


# ---------------------------------------------------------------- gradcheck

def gradcheck(loss_fn: Callable[[], float], params: Mapping[str, ParamTensor] | Iterable[ParamTensor],
              epsilon: float = 1e-4, max_coords: int | None = 20,
              rng: np.random.Generator | None = None, per_param: dict | None = None) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must zero and populate ``.grad`` of every param and return
    the scalar loss. Up to ``max_coords`` coordinates per tensor are probed
    (all of them when None). Returns the max relative error; if ``per_param``
    is a dict it is filled with the per-tensor maxima.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    rng = rng or np.random.default_rng(0)
    named = dict(params) if isinstance(params, Mapping) else {str(i): p for i, p in enumerate(params)}

    base = loss_fn()
    if not math.isfinite(base):
        raise NumericError(f"non-finite loss {base}")
    analytic = {k: p.grad.copy() for k, p in named.items()}

    worst = 0.0
    for name, p in named.items():
        size = p.value.size
        if max_coords is None or size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
        flat = p.value.reshape(-1)
        err_here = 0.0
        for c in coords:
            old = flat[c]
            flat[c] = old + epsilon
            up = loss_fn()
            flat[c] = old - epsilon
            down = loss_fn()
            flat[c] = old
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss while probing {name}[{c}]")
            num = (up - down) / (2.0 * epsilon)
            ana = analytic[name].reshape(-1)[c]
            rel = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            err_here = max(err_here, rel)
        if per_param is not None:
            per_param[name] = err_here
        worst = max(worst, err_here)
    loss_fn()  # leave grads consistent with the unperturbed params
    return worst


# ---------------------------------------------------------------- checkpoints

def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON header into one ``.npz`` archive."""
    header = {"format": "yolor-checkpoint", "format_version": CHECKPOINT_FORMAT_VERSION,
              "tensors": {k: list(v.shape) for k, v in tensors.items()}, "meta": meta or {}}
    payload = {f"t/{k}": np.ascontiguousarray(v) for k, v in tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
                 **payload)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(z["__header__"].tobytes().decode())
        if header.get("format") != "yolor-checkpoint":
            raise ValueError(f"{path}: not a checkpoint file")
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        tensors = {k[2:]: z[k].copy() for k in z.files if k.startswith("t/")}
    for k, shape in header["tensors"].items():
        if list(tensors[k].shape) != shape:
            raise ValueError(f"{path}: tensor {k} has shape {tensors[k].shape}, header says {shape}")
    return tensors, header["meta"]
