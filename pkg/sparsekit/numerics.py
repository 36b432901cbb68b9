"""
Dense linear algebra, deterministic randomness and finite-difference helpers
shared by every other module.

Tensors are torch tensors; `Tensor2` is a 2-D one (rows x cols, row-major).
Operator-correctness work runs in float64, the trainer may switch to float32.
"""
from __future__ import annotations

import logging
from typing import Callable, Iterable, Literal

import numpy as np
import torch

from sparsekit.exceptions import ArgumentException, EmptySupportException, NumericException, ShapeException

logger = logging.getLogger("sparsekit")

Tensor2 = torch.Tensor
Precision = Literal["float64", "float32"]

_DTYPES = {
    "float64": torch.float64,
    "float32": torch.float32,
}


def set_precision(precision: Precision) -> torch.dtype:
    if precision not in _DTYPES:
        raise ArgumentException(f"unknown precision {precision}")
    dtype = _DTYPES[precision]
    torch.set_default_dtype(dtype)
    return dtype


def default_dtype() -> torch.dtype:
    return torch.get_default_dtype()


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericException(f"{what} contains NaN or Inf", at=what)
    return t


def as_tensor2(data, what: str = "tensor") -> Tensor2:
    """
    Coerce nested lists / ndarrays to a finite 2-D tensor of the default dtype.
    """
    t = torch.as_tensor(data, dtype=default_dtype())
    if t.dim() != 2:
        raise ShapeException(f"{what} must be 2-D, got shape {tuple(t.shape)}", at=what)
    return check_finite(t, what)


def identity(n: int) -> Tensor2:
    return torch.eye(n, dtype=default_dtype())


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeException(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeException(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax_row(s: torch.Tensor) -> torch.Tensor:
    """
    Max-subtracted softmax over the last dim; -inf entries are masked and get 0.
    """
    if bool(torch.isnan(s).any()) or bool(torch.isposinf(s).any()):
        raise NumericException("softmax input must be finite or -inf (masked)")
    unmasked = torch.isfinite(s)
    if not bool(unmasked.any(dim=-1).all()):
        raise EmptySupportException("softmax row has every entry masked")
    m = s.max(dim=-1, keepdim=True).values
    e = torch.exp(s - m)
    return e / e.sum(dim=-1, keepdim=True)


def finite_diff_jvp(
        f: Callable[[np.ndarray], np.ndarray],
        z: np.ndarray,
        v: np.ndarray,
        h: float = 1e-6,
) -> np.ndarray:
    """
    central difference (f(z + h v) - f(z - h v)) / 2h
    """
    if h <= 0:
        raise ArgumentException("finite difference step must be positive")
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    plus = np.asarray(f(z + h * v), dtype=np.float64)
    minus = np.asarray(f(z - h * v), dtype=np.float64)
    return (plus - minus) / (2.0 * h)


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), floor)
    return float(np.max(np.abs(a - n), initial=0.0)) / scale


# ---- randomness ---- #

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    """
    counter-based Philox stream: same seed, same draws, on every platform.
    """
    return np.random.Generator(np.random.Philox(seed))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def randn(rng: Rng, *shape: int) -> torch.Tensor:
    """
    normal draws from the numpy stream, as a tensor of the default dtype.
    """
    return torch.as_tensor(rng.standard_normal(shape), dtype=default_dtype())


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


def percentiles(samples: Iterable[float], qs=(10, 50, 90)) -> list[float]:
    arr = np.asarray(list(samples), dtype=np.float64)
    if arr.size == 0:
        return [float("nan")] * len(qs)
    return [float(x) for x in np.percentile(arr, qs)]
