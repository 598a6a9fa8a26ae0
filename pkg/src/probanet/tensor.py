"""Dense rank-3 tensor ops with hand-written backward passes.

A feature map is a C-contiguous float64 ndarray of shape (height, width,
channels); ``ravel()`` gives the canonical row-major (h, w, c) element
order used by the text dump format and by every flattened view in the
package.  All ops are pure: inputs are never written to.

Gradients are explicit per-op vector-Jacobian products rather than a
general tape; the network that uses them is small and fixed, and the
finite-difference oracle below checks every pair.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError, NumericError

FeatureMap = np.ndarray

# Open-interval bounds for sigmoid: the nearest float64 neighbours of 0 and 1.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def as_feature_map(values, shape: tuple[int, int, int] | None = None) -> FeatureMap:
    """Coerce to a float64 (H, W, C) array and validate it.

    Raises DimensionError for a wrong rank or inconsistent shape and
    NumericError if any value is non-finite.
    """
    x = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        x = x.reshape(shape)
    if x.ndim != 3:
        raise DimensionError(f"feature map must be rank 3, got shape {x.shape}")
    if not all(n > 0 for n in x.shape):
        raise DimensionError(f"feature map dimensions must be positive, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("feature map contains non-finite values")
    return x


@dataclass(frozen=True)
class Conv1x1Params:
    """Weights of a pointwise (1x1) convolution: per-pixel affine map."""

    weight: np.ndarray  # (out_channels, in_channels)
    bias: np.ndarray    # (out_channels,)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weight, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        if w.ndim != 2:
            raise DimensionError(f"weight must be a matrix, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise DimensionError(
                f"bias shape {b.shape} does not match {w.shape[0]} output channels"
            )
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


def conv1x1_forward(x: FeatureMap, p: Conv1x1Params) -> FeatureMap:
    """Apply the per-pixel affine map: out(i,j) = weight @ x(i,j) + bias."""
    h, w, c = x.shape
    if c != p.in_channels:
        raise DimensionError(
            f"input has {c} channels but conv expects {p.in_channels}"
        )
    out = x.reshape(h * w, c) @ p.weight.T + p.bias
    return out.reshape(h, w, p.out_channels)


def conv1x1_backward(
    x: FeatureMap, p: Conv1x1Params, grad_out: FeatureMap
) -> tuple[FeatureMap, np.ndarray, np.ndarray]:
    """VJPs of conv1x1_forward w.r.t. input, weight and bias."""
    h, w, c = x.shape
    if grad_out.shape != (h, w, p.out_channels):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match output "
            f"shape {(h, w, p.out_channels)}"
        )
    g = grad_out.reshape(h * w, p.out_channels)
    grad_x = (g @ p.weight).reshape(h, w, c)
    grad_weight = g.T @ x.reshape(h * w, c)
    grad_bias = g.sum(axis=0)
    return grad_x, grad_weight, grad_bias


def relu(x: FeatureMap) -> FeatureMap:
    return np.maximum(x, 0.0)


def relu_backward(x: FeatureMap, grad_out: FeatureMap) -> FeatureMap:
    """Pass gradient where x > 0; subgradient 0 at exactly 0."""
    _check_same_shape(x, grad_out)
    return np.where(x > 0.0, grad_out, 0.0)


def sigmoid(x: FeatureMap) -> FeatureMap:
    """Numerically stable logistic, clipped into the open interval (0, 1).

    Without the clip, float64 saturates to exactly 0 or 1 for |x| > ~37;
    the clip keeps the strict-bounds contract at a sub-ulp perturbation.
    """
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid_backward(y: FeatureMap, grad_out: FeatureMap) -> FeatureMap:
    """VJP given the forward output y: y * (1 - y) * grad_out."""
    _check_same_shape(y, grad_out)
    return y * (1.0 - y) * grad_out


def hadamard(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    _check_same_shape(a, b)
    return a * b


def hadamard_backward(
    a: FeatureMap, b: FeatureMap, grad_out: FeatureMap
) -> tuple[FeatureMap, FeatureMap]:
    _check_same_shape(a, b)
    _check_same_shape(a, grad_out)
    return b * grad_out, a * grad_out


def mean_and_variance(x: np.ndarray) -> tuple[float, float]:
    """Mean and population variance (divisor N) over all elements."""
    if x.size == 0:
        raise DimensionError("mean_and_variance of an empty tensor")
    mean = float(x.mean())
    variance = float(np.mean((x - mean) ** 2))
    return mean, variance


def variance_backward(x: np.ndarray, grad_out: float = 1.0) -> np.ndarray:
    """Gradient of the population variance: 2 (x_k - mean) / N per element."""
    if x.size == 0:
        raise DimensionError("variance_backward of an empty tensor")
    return grad_out * 2.0 * (x - x.mean()) / x.size


def finite_diff_gradient(
    f: Callable[[FeatureMap], float], x: FeatureMap, h: float = 1e-5
) -> FeatureMap:
    """Central-difference gradient estimate of a scalar function, per element."""
    if h <= 0:
        raise DomainError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for k in range(flat_x.size):
        orig = flat_x[k]
        flat_x[k] = orig + h
        f_plus = float(f(x))
        flat_x[k] = orig - h
        f_minus = float(f(x))
        flat_x[k] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(
                f"non-finite function value while differencing element {k}"
            )
        flat_g[k] = (f_plus - f_minus) / (2.0 * h)
    return grad


def dump_feature_map(x: FeatureMap) -> str:
    """Text dump: header "H W C", then H*W lines of C values, row-major."""
    h, w, c = x.shape
    lines = [f"{h} {w} {c}"]
    rows = x.reshape(h * w, c)
    for row in rows:
        lines.append(" ".join(format(v, ".17g") for v in row))
    return "\n".join(lines) + "\n"


def load_feature_map(text: str) -> FeatureMap:
    """Parse the text dump format produced by dump_feature_map."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DimensionError("empty feature map dump")
    try:
        h, w, c = (int(tok) for tok in lines[0].split())
    except ValueError as exc:
        raise DimensionError(f"bad header line {lines[0]!r}") from exc
    if len(lines) - 1 != h * w:
        raise DimensionError(
            f"expected {h * w} data lines for a {h}x{w}x{c} map, got {len(lines) - 1}"
        )
    data = np.array(
        [[float(tok) for tok in ln.split()] for ln in lines[1:]], dtype=np.float64
    )
    if data.shape != (h * w, c):
        raise DimensionError("data lines do not all carry the declared channel count")
    return as_feature_map(data.reshape(h, w, c))


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
