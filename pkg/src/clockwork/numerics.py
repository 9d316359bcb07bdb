"""Dense-tensor primitives with shape validation, finiteness checks and op counting.

Tensors are ``torch.Tensor`` in NCHW row-major layout.  Gradients come from
torch autograd; every primitive here is gated by :func:`finite_diff_grad_check`
in the test suite.  All model code runs in float32; float64 is accepted so that
the finite-difference oracle can evaluate the same functions at higher precision.

FLOP convention: FLOPs = 2 x multiply-accumulates, plus one FLOP per bias add.
Group norm is charged ``GROUP_NORM_FLOPS_PER_ELEMENT`` per element and softmax
``SOFTMAX_FLOPS_PER_ELEMENT`` per score.  Elementwise activations and residual
adds are not counted.
"""

from __future__ import annotations

import math
from collections import defaultdict
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidCheckError, NumericError

Tensor = torch.Tensor

GROUP_NORM_FLOPS_PER_ELEMENT = 8
SOFTMAX_FLOPS_PER_ELEMENT = 3

_FLOAT_TYPES = (torch.float32, torch.float64)


# ---------------------------------------------------------------------------
# instrumentation


class OpCounter:
    """Accumulates FLOPs and call counts keyed by (scope path, op kind)."""

    def __init__(self) -> None:
        self.flops: dict[tuple[str, str], int] = defaultdict(int)
        self.calls: dict[tuple[str, str], int] = defaultdict(int)

    def add(self, kind: str, flops: int) -> None:
        key = ("/".join(_SCOPE.get()), kind)
        self.flops[key] += int(flops)
        self.calls[key] += 1

    @staticmethod
    def _matches(path: str, prefix: str | None) -> bool:
        if prefix is None:
            return True
        return path == prefix or path.startswith(prefix + "/")

    def _select(self, table: dict, prefix: str | None, kind: str | None, segment: str | None) -> int:
        return sum(
            v for (p, k), v in table.items()
            if self._matches(p, prefix)
            and (kind is None or k == kind)
            and (segment is None or segment in p.split("/"))
        )

    def total(self, prefix: str | None = None, kind: str | None = None, segment: str | None = None) -> int:
        """FLOPs under a scope prefix, optionally restricted to an op kind or a path segment."""
        return self._select(self.flops, prefix, kind, segment)

    def count(self, prefix: str | None = None, kind: str | None = None, segment: str | None = None) -> int:
        return self._select(self.calls, prefix, kind, segment)

    def paths(self) -> set[str]:
        return {p for p, _ in self.flops}


_COUNTER: ContextVar[OpCounter | None] = ContextVar("clockwork_op_counter", default=None)
_SCOPE: ContextVar[tuple[str, ...]] = ContextVar("clockwork_op_scope", default=())


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    """Install a fresh counter for the current context (thread/task local)."""
    counter = OpCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


@contextmanager
def op_scope(name: str) -> Iterator[None]:
    token = _SCOPE.set(_SCOPE.get() + (name,))
    try:
        yield
    finally:
        _SCOPE.reset(token)


def _record(kind: str, flops: int) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.add(kind, flops)


# ---------------------------------------------------------------------------
# primitives


def _all_finite(x: Tensor) -> bool:
    # a finite sum implies finite elements (inf and nan propagate); overflow falls back to the full test
    total = x.detach().sum()
    return bool(torch.isfinite(total)) or bool(torch.isfinite(x).all())


def _check_finite(out: Tensor, name: str) -> Tensor:
    if not _all_finite(out):
        raise NumericError(f"{name} produced non-finite values")
    return out


def _check_float(*tensors: Tensor | None) -> None:
    for t in tensors:
        if t is not None and t.dtype not in _FLOAT_TYPES:
            raise ConfigurationError(f"expected float32/float64 tensor, got {t.dtype}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D convolution. ``weight`` is (C_out, C_in, K, K)."""
    _check_float(x, weight, bias)
    if x.dim() != 4 or weight.dim() != 4:
        raise ConfigurationError(f"conv2d expects NCHW input and OIKK weight, got {tuple(x.shape)}, {tuple(weight.shape)}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ConfigurationError(f"conv2d channel mismatch: input has {c}, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ConfigurationError(f"conv2d bias shape {tuple(bias.shape)} != ({c_out},)")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv2d needs stride >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ConfigurationError("conv2d kernel larger than padded input")
    out = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    ho, wo = out.shape[-2:]
    _record("conv2d", n * (2 * kh * kw * c_in * c_out * ho * wo + (c_out * ho * wo if bias is not None else 0)))
    return _check_finite(out, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d` w.r.t. its input).

    ``weight`` is (C_in, C_out, K, K); output extent is (H-1)*stride - 2*padding + K.
    """
    _check_float(x, weight, bias)
    if x.dim() != 4 or weight.dim() != 4:
        raise ConfigurationError("conv_transpose2d expects NCHW input and IOKK weight")
    n, c, h, w = x.shape
    c_in, c_out, kh, kw = weight.shape
    if c != c_in:
        raise ConfigurationError(f"conv_transpose2d channel mismatch: input has {c}, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ConfigurationError("conv_transpose2d bias shape mismatch")
    if stride < 1 or padding < 0:
        raise ConfigurationError("conv_transpose2d needs stride >= 1 and padding >= 0")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ConfigurationError("conv_transpose2d output would be empty")
    out = F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)
    _record("conv_transpose2d",
            n * (2 * kh * kw * c_in * c_out * h * w + (c_out * ho * wo if bias is not None else 0)))
    return _check_finite(out, "conv_transpose2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (out, in)."""
    _check_float(x, weight, bias)
    if weight.dim() != 2 or x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(f"linear shape mismatch: {tuple(x.shape)} vs {tuple(weight.shape)}")
    out = F.linear(x, weight, bias)
    rows = x.numel() // x.shape[-1]
    d_out, d_in = weight.shape
    _record("linear", rows * (2 * d_in * d_out + (d_out if bias is not None else 0)))
    return _check_finite(out, "linear")


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    _check_float(x, gamma, beta)
    if x.dim() < 2:
        raise ConfigurationError("group_norm expects at least (N, C)")
    c = x.shape[1]
    if groups < 1 or c % groups:
        raise ConfigurationError(f"group_norm: {c} channels not divisible into {groups} groups")
    # explicit two-pass statistics: exact zeros for constant groups
    n = x.shape[0]
    g = x.reshape(n, groups, -1)
    centred = g - g.mean(dim=-1, keepdim=True)
    var = centred.square().mean(dim=-1, keepdim=True)
    out = (centred * torch.rsqrt(var + eps)).reshape(x.shape)
    affine_shape = (1, c) + (1,) * (x.dim() - 2)
    if gamma is not None:
        out = out * gamma.reshape(affine_shape)
    if beta is not None:
        out = out + beta.reshape(affine_shape)
    _record("group_norm", GROUP_NORM_FLOPS_PER_ELEMENT * x.numel())
    return _check_finite(out, "group_norm")


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over (N, L, D) tensors."""
    _check_float(q, k, v)
    if q.dim() != 3 or q.shape != k.shape or k.shape != v.shape:
        raise ConfigurationError(
            f"attention expects matching (N, L, D) tensors, got {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    n, length, d = q.shape
    scores = torch.matmul(q, k.transpose(1, 2)) / math.sqrt(d)
    weights = torch.softmax(scores, dim=-1)
    out = torch.matmul(weights, v)
    _record("attention", n * (4 * length * length * d + SOFTMAX_FLOPS_PER_ELEMENT * length * length))
    return _check_finite(out, "attention")


def silu(x: Tensor) -> Tensor:
    return F.silu(x)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_grad_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    coords_per_param: int = 24,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps a list of tensors (same shapes as ``params``) to a scalar and must
    follow the dtype of its arguments.  The analytic gradient is taken at the
    parameters' own dtype; the central-difference reference is evaluated in
    float64 so that the check measures the backward pass, not f32 round-off.
    """
    leaves = [p.detach().clone().requires_grad_(True) for p in params]
    value = f(leaves)
    if value.numel() != 1:
        raise InvalidCheckError("gradient check needs a scalar function")
    again = f([p.detach().clone() for p in params])
    if not torch.equal(value.detach(), again.detach()):
        raise InvalidCheckError("function is not deterministic")
    grads = torch.autograd.grad(value, leaves, allow_unused=True)

    base = [p.detach().to(torch.float64).clone() for p in params]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for i, p in enumerate(base):
        grad = grads[i]
        flat_grad = torch.zeros(p.numel(), dtype=torch.float64) if grad is None else grad.detach().reshape(-1).double()
        n = p.numel()
        coords = range(n) if n <= coords_per_param else torch.randperm(n, generator=gen)[:coords_per_param].tolist()
        for j in coords:
            shifted = list(base)
            plus = p.clone()
            plus.view(-1)[j] += h
            shifted[i] = plus
            f_plus = float(f(shifted))
            minus = p.clone()
            minus.view(-1)[j] -= h
            shifted[i] = minus
            f_minus = float(f(shifted))
            fd = (f_plus - f_minus) / (2 * h)
            err = abs(float(flat_grad[j]) - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, Tensor] = field(default_factory=dict)
    second_moment: dict[str, Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(state: AdamState, params: Mapping[str, Tensor]) -> None:
    """One bias-corrected Adam update, in place.

    Parameters whose ``.grad`` is None are left untouched.  A non-finite gradient
    anywhere rejects the whole step.
    """
    live = {name: p for name, p in params.items() if p.grad is not None}
    for name, p in live.items():
        if p.grad.shape != p.shape:
            raise ConfigurationError(f"gradient shape mismatch for {name}")
        if not _all_finite(p.grad):
            raise NumericError(f"non-finite gradient for {name}; step rejected")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1 ** state.step
    correction2 = 1 - b2 ** state.step
    for name, p in live.items():
        g = p.grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = torch.zeros_like(p)
            v = torch.zeros_like(p)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        state.first_moment[name] = m
        state.second_moment[name] = v
        denom = (v / correction2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / correction1)
