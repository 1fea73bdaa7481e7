"""Kernel activation functions.

A KAF replaces a fixed nonlinearity with a learnable mixture of Gaussian
bumps placed on a fixed, evenly spaced dictionary:

    g(s) = sum_i alpha_i * exp(-gamma * (s - d_i)^2)

Only the mixing coefficients alpha are learnable; the dictionary and the
bandwidth gamma are frozen at construction. The two-dimensional variant
combines a pair of activation values through a mixture over the D x D
grid of dictionary pairs, halving the channel count.

Gradients are exact and cheap: g is linear in alpha (d g / d alpha_i is
just the kernel value), and d g / d s is the alpha-weighted sum of the
kernel derivatives -2*gamma*(s - d_i)*kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from . import _kernels
from .errors import NumericError, ParameterError, ShapeError
from .tensor import Tensor, as_tensor


def make_dictionary(d_size: int, bound: float) -> tuple[Tensor, float]:
    """Evenly spaced dictionary on [-bound, bound] plus its bandwidth.

    Spacing is delta = 2*bound/(d_size-1) and the bandwidth follows the
    rule gamma = 1/(2*delta^2), which keeps neighbouring kernels
    overlapping at any dictionary size.
    """
    if d_size < 2:
        raise ParameterError(f"make_dictionary: need at least 2 elements, got {d_size}")
    if bound <= 0:
        raise ParameterError(f"make_dictionary: bound must be positive, got {bound}")
    dictionary = np.linspace(-bound, bound, d_size)
    delta = 2.0 * bound / (d_size - 1)
    gamma = 1.0 / (2.0 * delta * delta)
    return dictionary, gamma


@dataclass(frozen=True)
class KafParams:
    """Parameters of one kernel activation layer.

    dictionary and gamma are fixed for the lifetime of the object; alpha is
    the learnable part. alpha is either a vector shared by every element
    (shape (D,) or (D*D,) for the pairwise variant) or one row per channel
    (shape (C, D) or (P, D*D)).
    """

    dictionary: Tensor
    alpha: Tensor
    gamma: float
    per_channel: bool = field(default=True)

    def __post_init__(self):
        d = as_tensor(self.dictionary, "dictionary")
        a = as_tensor(self.alpha, "alpha")
        if d.ndim != 1 or d.size < 1:
            raise ParameterError("KafParams: dictionary must be a non-empty 1-D array")
        if d.size > 1:
            steps = np.diff(d)
            if np.any(steps <= 0):
                raise ParameterError("KafParams: dictionary must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
                raise ParameterError("KafParams: dictionary must be evenly spaced")
        if not self.gamma > 0:
            raise ParameterError(f"KafParams: gamma must be positive, got {self.gamma}")
        if a.ndim not in (1, 2):
            raise ParameterError("KafParams: alpha must be 1-D (shared) or 2-D (per channel)")
        if self.per_channel != (a.ndim == 2):
            raise ParameterError("KafParams: per_channel flag does not match alpha rank")
        n = d.size
        if a.shape[-1] not in (n, n * n):
            raise ParameterError(
                f"KafParams: alpha last extent {a.shape[-1]} is neither D={n} nor D^2={n * n}"
            )
        d.setflags(write=False)
        object.__setattr__(self, "dictionary", d)
        object.__setattr__(self, "alpha", a)

    @property
    def d_size(self) -> int:
        return self.dictionary.size

    @property
    def pairwise(self) -> bool:
        n = self.d_size
        return n > 1 and self.alpha.shape[-1] == n * n

    @cached_property
    def grid(self) -> Tensor:
        """D^2 x 2 grid of dictionary pairs; row i*D+j is (d_i, d_j)."""
        d = self.dictionary
        n = d.size
        g = np.empty((n * n, 2))
        g[:, 0] = np.repeat(d, n)
        g[:, 1] = np.tile(d, n)
        g.setflags(write=False)
        return g


def _alpha_rows(p: KafParams, channels: int, op: str) -> Tensor:
    if p.per_channel:
        if p.alpha.shape[0] != channels:
            raise ShapeError(
                f"{op}: axis 1 has {channels} channels but alpha has {p.alpha.shape[0]} rows"
            )
        return p.alpha
    return np.ascontiguousarray(np.broadcast_to(p.alpha, (channels, p.alpha.size)))


def _to_rows(s: Tensor, op: str, want_even: bool = False) -> tuple[Tensor, tuple, int]:
    """Flatten to (rows, channels) with the channel axis (axis 1) last."""
    if s.ndim < 2:
        if want_even:
            raise ShapeError(f"{op}: input must have a channel axis (rank >= 2), got rank {s.ndim}")
        return s.reshape(-1, 1), s.shape, 1
    c = s.shape[1]
    if want_even and c % 2 != 0:
        raise ShapeError(f"{op}: axis 1 has odd extent {c}; channel pairs require an even count")
    x2 = np.ascontiguousarray(np.moveaxis(s, 1, -1).reshape(-1, c))
    return x2, s.shape, c


def _from_rows(y2: Tensor, shape: tuple, out_channels: int) -> Tensor:
    if len(shape) < 2:
        return y2.reshape(shape)
    tail = shape[2:]
    y = y2.reshape((shape[0],) + tail + (out_channels,))
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def kaf_forward(s: Tensor, p: KafParams) -> Tensor:
    """Element-wise kernel expansion g(s); output shape equals input shape.

    With per-channel alpha, axis 1 of `s` is the channel axis and selects
    the mixture row.
    """
    s = as_tensor(s, "s")
    if p.pairwise:
        raise ParameterError("kaf_forward: params carry D^2 coefficients; use kaf2d_forward")
    if p.per_channel:
        x2, shape, c = _to_rows(s, "kaf_forward")
        alpha = _alpha_rows(p, c, "kaf_forward")
        y2 = _kernels.kaf_forward(x2, p.dictionary, alpha, p.gamma)
        return _from_rows(y2, shape, c)
    flat = s.reshape(-1, 1)
    y = _kernels.kaf_forward(flat, p.dictionary, p.alpha[None, :], p.gamma)
    return y.reshape(s.shape)


def kaf_backward(s: Tensor, upstream: Tensor, p: KafParams) -> tuple[Tensor, Tensor]:
    """Gradients of sum(upstream * g(s)) with respect to alpha and s."""
    s = as_tensor(s, "s")
    upstream = as_tensor(upstream, "upstream")
    if upstream.shape != s.shape:
        raise ShapeError(f"kaf_backward: upstream shape {upstream.shape} != input shape {s.shape}")
    if p.pairwise:
        raise ParameterError("kaf_backward: params carry D^2 coefficients; use kaf2d_backward")
    if p.per_channel:
        x2, shape, c = _to_rows(s, "kaf_backward")
        g2, _, _ = _to_rows(upstream, "kaf_backward")
        alpha = _alpha_rows(p, c, "kaf_backward")
        galpha, gx2 = _kernels.kaf_backward(x2, p.dictionary, alpha, p.gamma, g2)
        return galpha, _from_rows(gx2, shape, c)
    flat = s.reshape(-1, 1)
    gflat = upstream.reshape(-1, 1)
    galpha, gx = _kernels.kaf_backward(flat, p.dictionary, p.alpha[None, :], p.gamma, gflat)
    return galpha[0], gx.reshape(s.shape)


def kaf2d_forward(s: Tensor, p: KafParams) -> Tensor:
    """Pairwise kernel expansion over consecutive channel pairs (2k, 2k+1).

    Axis 1 must be even; the output has half as many channels, each fed by
    a mixture over the D x D dictionary grid with the 2-D Gaussian kernel
    exp(-gamma * ||s - d_i||^2).
    """
    s = as_tensor(s, "s")
    if not p.pairwise:
        raise ParameterError("kaf2d_forward: params carry D coefficients; use kaf_forward")
    x2, shape, c = _to_rows(s, "kaf2d_forward", want_even=True)
    pairs = c // 2
    alpha = _alpha_rows(p, pairs, "kaf2d_forward")
    y2 = _kernels.kaf2d_forward(x2, p.dictionary, alpha, p.gamma)
    return _from_rows(y2, shape, pairs)


def kaf2d_backward(s: Tensor, upstream: Tensor, p: KafParams) -> tuple[Tensor, Tensor]:
    """Gradients of the pairwise expansion for alpha and both pair inputs."""
    s = as_tensor(s, "s")
    upstream = as_tensor(upstream, "upstream")
    x2, shape, c = _to_rows(s, "kaf2d_backward", want_even=True)
    pairs = c // 2
    expected = shape[:1] + (pairs,) + shape[2:]
    if upstream.shape != expected:
        raise ShapeError(
            f"kaf2d_backward: upstream shape {upstream.shape} != expected {expected}"
        )
    if not p.pairwise:
        raise ParameterError("kaf2d_backward: params carry D coefficients; use kaf_backward")
    g2, _, _ = _to_rows(upstream, "kaf2d_backward")
    alpha = _alpha_rows(p, pairs, "kaf2d_backward")
    galpha, gx2 = _kernels.kaf2d_backward(x2, p.dictionary, alpha, p.gamma, g2)
    if not p.per_channel:
        galpha = galpha.sum(axis=0)
    return galpha, _from_rows(gx2, shape, c)


def gram_matrix(p: KafParams) -> Tensor:
    """Kernel matrix K_ij = kernel(d_i, d_j) over the dictionary points."""
    d = p.dictionary
    diff = d[:, None] - d[None, :]
    return np.exp(-p.gamma * diff * diff)


def psd_check(p: KafParams) -> float:
    """Smallest eigenvalue of the dictionary Gram matrix.

    The quadratic form sum_ij alpha_i alpha_j kernel(d_i, d_j) equals
    alpha^T K alpha, so a non-negative spectrum (up to round-off) certifies
    the form is non-negative for every alpha. The grid Gram of the
    pairwise variant is the Kronecker square of K and inherits the
    property, so the 1-D check covers both.
    """
    k = gram_matrix(p)
    try:
        eig = np.linalg.eigvalsh(k)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"psd_check: eigenvalue solver failed: {exc}") from exc
    return float(eig[0])


def elu(x: Tensor) -> Tensor:
    """ELU-shaped curve, a convenient warm-start target for init_alpha."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, np.expm1(x))


def init_alpha(
    p: KafParams,
    mode: str = "random",
    target: Callable[[Tensor], Tensor] | None = None,
    rng: np.random.Generator | int | None = None,
) -> Tensor:
    """Fresh mixing coefficients shaped like p.alpha.

    "random" draws i.i.d. normal(0, 0.3). "fit_target" solves the
    ridge-regularised normal equations (ridge 1e-4) so that g(d_j)
    approximates target(d_j); for per-channel alpha every row gets the
    same fit. Fitting is defined for the 1-D expansion only.
    """
    if mode == "random":
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        return gen.normal(0.0, 0.3, size=p.alpha.shape)
    if mode == "fit_target":
        if target is None:
            raise ParameterError("init_alpha: fit_target mode requires a target function")
        if p.pairwise:
            raise ParameterError("init_alpha: fit_target is defined for the 1-D expansion only")
        k = gram_matrix(p)
        t = as_tensor(target(p.dictionary), "target(dictionary)")
        if t.shape != (p.d_size,):
            raise ParameterError(
                f"init_alpha: target must map the dictionary to {p.d_size} values, got shape {t.shape}"
            )
        lhs = k.T @ k + 1e-4 * np.eye(p.d_size)
        try:
            row = np.linalg.solve(lhs, k.T @ t)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"init_alpha: normal equations are singular: {exc}") from exc
        if p.alpha.ndim == 2:
            return np.tile(row, (p.alpha.shape[0], 1))
        return row
    raise ParameterError(f"init_alpha: unknown mode {mode!r} (use random or fit_target)")
