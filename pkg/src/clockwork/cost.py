"""Analytic FLOP model, pipeline cost of baseline vs clock-gated sampling, PnP cost formulas, latency bench.

Convention (shared with the runtime counter in :mod:`clockwork.numerics`):

=================  ==========================================================
layer              FLOPs per sample
=================  ==========================================================
conv2d             2*K^2*C_in*C_out*H_out*W_out  (+ C_out*H_out*W_out bias)
conv_transpose2d   2*K^2*C_in*C_out*H_in*W_in    (+ C_out*H_out*W_out bias)
linear             2*D_in*D_out                  (+ D_out bias)
group_norm         8 * elements
attention          4*L^2*D (QK^T and AV) + 3*L^2 (softmax)
=================  ==========================================================

Elementwise activations, residual adds and embedding lookups are free.
"""

from __future__ import annotations

import csv
import json
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import torch

from .adaptor import AdaptorSpec
from .clockwork import ClockSchedule
from .errors import ConfigurationError
from .unet import UNetConfig

COMPONENTS = ("embed", "high_in", "low", "high_out", "adaptor")


@dataclass(frozen=True)
class LayerDesc:
    kind: str
    c_in: int = 0
    c_out: int = 0
    kernel: int = 0
    h_in: int = 0
    w_in: int = 0
    h_out: int = 0
    w_out: int = 0
    numel: int = 0
    length: int = 0
    dim: int = 0
    bias: bool = True


def layer_flops(desc: LayerDesc, include_bias: bool = True) -> int:
    k = desc.kind
    bias = include_bias and desc.bias
    if k == "conv2d":
        macs = desc.kernel ** 2 * desc.c_in * desc.c_out * desc.h_out * desc.w_out
        return 2 * macs + (desc.c_out * desc.h_out * desc.w_out if bias else 0)
    if k == "conv_transpose2d":
        macs = desc.kernel ** 2 * desc.c_in * desc.c_out * desc.h_in * desc.w_in
        return 2 * macs + (desc.c_out * desc.h_out * desc.w_out if bias else 0)
    if k == "linear":
        return 2 * desc.c_in * desc.c_out + (desc.c_out if bias else 0)
    if k == "group_norm":
        return 8 * desc.numel
    if k == "attention":
        return 4 * desc.length ** 2 * desc.dim + 3 * desc.length ** 2
    raise ConfigurationError(f"unknown layer kind {k!r}")


# -- layer enumeration --------------------------------------------------------


def _conv(c_in: int, c_out: int, k: int, res_out: int) -> LayerDesc:
    return LayerDesc("conv2d", c_in=c_in, c_out=c_out, kernel=k, h_out=res_out, w_out=res_out)


def _convt(c_in: int, c_out: int, res_in: int) -> LayerDesc:
    return LayerDesc("conv_transpose2d", c_in=c_in, c_out=c_out, kernel=4, h_in=res_in, w_in=res_in,
                     h_out=2 * res_in, w_out=2 * res_in)


def _norm(c: int, res: int) -> LayerDesc:
    return LayerDesc("group_norm", numel=c * res * res)


def _resblock(c_in: int, c_out: int, emb: int, res: int) -> list[LayerDesc]:
    layers = [_norm(c_in, res), _conv(c_in, c_out, 3, res), LayerDesc("linear", c_in=emb, c_out=c_out),
              _norm(c_out, res), _conv(c_out, c_out, 3, res)]
    if c_in != c_out:
        layers.append(_conv(c_in, c_out, 1, res))
    return layers


def _attention(c: int, res: int) -> list[LayerDesc]:
    return [_norm(c, res), _conv(c, 3 * c, 1, res), LayerDesc("attention", length=res * res, dim=c),
            _conv(c, c, 1, res)]


def unet_layers(cfg: UNetConfig) -> dict[str, list[LayerDesc]]:
    """Per-sample layer list of each split component, derived from the config alone."""
    ch, emb, k = cfg.channels, cfg.emb_dim, cfg.cutoff_stage
    attn = cfg.attention_stages
    s_count = cfg.num_stages
    parts: dict[str, list[LayerDesc]] = {"embed": [], "high_in": [], "low": [], "high_out": []}
    parts["embed"] += [LayerDesc("linear", c_in=cfg.time_embed_dim, c_out=emb), LayerDesc("linear", c_in=emb, c_out=emb)]

    def side(stage: int) -> str:
        return "low" if stage >= k else "high"

    parts["high_in"].append(_conv(cfg.in_channels, ch[0], 3, cfg.image_size))
    for s in range(s_count):
        res = cfg.stage_size(s)
        dest = parts["high_in" if side(s) == "high" else "low"]
        c_in = ch[s - 1] if s else ch[0]
        for c_a in (c_in, ch[s]):
            dest += _resblock(c_a, ch[s], emb, res)
            if s in attn:
                dest += _attention(ch[s], res)
        if s < s_count - 1:
            dest.append(_conv(ch[s], ch[s], 3, res // 2))

    low_res = cfg.stage_size(s_count - 1)
    parts["low"] += _resblock(ch[-1], ch[-1], emb, low_res)
    if s_count - 1 in attn:
        parts["low"] += _attention(ch[-1], low_res)
    parts["low"] += _resblock(ch[-1], ch[-1], emb, low_res)

    for s in reversed(range(s_count)):
        res = cfg.stage_size(s)
        dest = parts["high_out" if side(s) == "high" else "low"]
        c_prev = ch[s - 1] if s else ch[0]
        for c_a, c_o in ((ch[s] + ch[s], ch[s]), (ch[s] + ch[s], ch[s]), (ch[s] + c_prev, c_prev)):
            dest += _resblock(c_a, c_o, emb, res)
            if s in attn:
                dest += _attention(c_o, res)
        if s > 0:
            # the upsample out of stage s produces stage s-1 resolution
            up_dest = parts["high_out" if side(s - 1) == "high" else "low"]
            up_dest.append(_convt(c_prev, c_prev, res))

    parts["high_out"] += [_norm(ch[0], cfg.image_size), _conv(ch[0], cfg.in_channels, 3, cfg.image_size)]
    return parts


def adaptor_layers(spec: AdaptorSpec | None, res: int) -> list[LayerDesc]:
    """Per-sample layers of an adaptor operating on ``res`` x ``res`` features."""
    if spec is None or spec.kind == "identity":
        return []
    c_in = spec.feature_channels * sum(i in spec.inputs for i in ("r_in", "r_out_prev"))
    w, emb = spec.channels, spec.emb_dim
    layers: list[LayerDesc] = []
    cond = [LayerDesc("linear", c_in=emb, c_out=w)] if "c_emb" in spec.inputs else []
    if spec.kind == "resnet":
        layers.append(_conv(c_in, w, 3, res // 2))
        layers += cond
        for _ in range(2):
            layers += _resblock(w, w, emb, res // 2)
        layers.append(_convt(w, spec.feature_channels, res // 2))
    else:
        layers.append(_conv(c_in, w, 3, res))
        layers += cond
        layers += [_conv(w, w, 3, res // 2), _conv(w, w, 3, res // 4)]
        for _ in range(spec.blocks):
            layers += _resblock(w, w, emb, res // 4)
        layers += [_convt(w, w, res // 4), _convt(w, w, res // 2), _conv(w, spec.feature_channels, 3, res)]
    return layers


def component_flops(cfg: UNetConfig, spec: AdaptorSpec | None = None) -> dict[str, int]:
    parts = unet_layers(cfg)
    out = {name: sum(layer_flops(d) for d in layers) for name, layers in parts.items()}
    out["adaptor"] = sum(layer_flops(d) for d in adaptor_layers(spec, cfg.stage_size(cfg.cutoff_stage)))
    return out


# -- pipeline -----------------------------------------------------------------


@dataclass
class FlopReport:
    components: dict[str, int]
    per_step: list[int]
    total: int
    baseline_total: int
    savings_fraction: float
    passes_per_step: int
    adaptor_steps: list[int]
    batch: int = 1
    instrumented_total: int | None = None

    @property
    def full_step(self) -> int:
        c = self.components
        return c["embed"] + c["high_in"] + c["low"] + c["high_out"]

    @property
    def high_step(self) -> int:
        c = self.components
        return c["embed"] + c["high_in"] + c["high_out"]

    @property
    def batch_total(self) -> int:
        return self.total * self.batch

    def to_json(self) -> str:
        d = asdict(self)
        d["full_step"] = self.full_step
        d["high_step"] = self.high_step
        return json.dumps(d, indent=2)


def pipeline_flops(cfg: UNetConfig, spec: AdaptorSpec | None, clock: ClockSchedule, num_steps: int,
                   guidance: bool = False) -> FlopReport:
    """Analytic per-sample cost of a ``num_steps`` generation under ``clock``.

    Guidance doubles every model pass (conditional + unconditional branch).
    """
    comp = component_flops(cfg, spec)
    passes = 2 if guidance else 1
    full = comp["embed"] + comp["high_in"] + comp["low"] + comp["high_out"]
    approx = comp["embed"] + comp["high_in"] + comp["high_out"] + comp["adaptor"]
    steps = clock.adaptor_steps(num_steps)
    if steps and spec is None:
        raise ConfigurationError("clock uses an adaptor but no adaptor spec was given")
    per_step = [passes * (approx if i in steps else full) for i in range(1, num_steps + 1)]
    total = sum(per_step)
    baseline = passes * full * num_steps
    return FlopReport(comp, per_step, total, baseline, 1.0 - total / baseline, passes, steps)


def closed_form_total(f_full: int, f_high: int, f_adaptor: int, num_steps: int, period: int) -> int:
    """(T - T div N) full steps plus (T div N) high-res + adaptor steps."""
    n_adapt = num_steps // period
    return (num_steps - n_adapt) * f_full + n_adapt * (f_high + f_adaptor)


# -- plug-and-play editing cost --------------------------------------------------


@dataclass(frozen=True)
class PnpCostInput:
    n_inv: int
    clock_inv: int
    n_gen: int
    clock_gen: int
    f_full: float
    f_high: float

    def __post_init__(self) -> None:
        if min(self.n_inv, self.n_gen) < 1 or min(self.clock_inv, self.clock_gen) < 1:
            raise ConfigurationError("step counts and clocks must be >= 1")


def _exact(x: float | int) -> Fraction:
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


def pnp_flops(p: PnpCostInput) -> tuple[float, float, float]:
    """(inversion, generation, total) FLOPs of a plug-and-play edit.

    Full passes are ``N div C``; generation runs a batch of three (cached latent,
    conditional, unconditional).  Evaluated in exact rational arithmetic.
    """
    f_full, f_high = _exact(p.f_full), _exact(p.f_high)
    full_i = p.n_inv // p.clock_inv
    full_g = p.n_gen // p.clock_gen
    f_i = full_i * f_full + (p.n_inv - full_i) * f_high
    f_g = 3 * (full_g * f_full + (p.n_gen - full_g) * f_high)
    return float(f_i), float(f_g), float(f_i + f_g)


# -- latency ---------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyStats:
    label: str
    median_ms: float
    p10: float
    p90: float
    samples: tuple[float, ...] = field(default=(), repr=False)


def _percentile(values: list[float], q: float) -> float:
    ordered = sorted(values)
    pos = (len(ordered) - 1) * q
    lo = int(pos)
    hi = min(lo + 1, len(ordered) - 1)
    return ordered[lo] + (ordered[hi] - ordered[lo]) * (pos - lo)


def _other_threads() -> list[threading.Thread]:
    # multiprocessing keeps an idle listener thread alive once tensors have been sent to a worker
    from multiprocessing import resource_sharer

    idle = getattr(getattr(resource_sharer, "_resource_sharer", None), "_thread", None)
    return [t for t in threading.enumerate() if t is not threading.current_thread() and t is not idle]


def latency_bench(fn: Callable[[], object], warmup: int = 1, iters: int = 10, label: str = "") -> LatencyStats:
    """Median and p10/p90 wall-clock of ``fn`` in milliseconds.

    Refuses to run while other Python threads are alive; torch intra-op
    parallelism is pinned to one thread for the duration.
    """
    if iters < 1:
        raise ConfigurationError("latency_bench needs iters >= 1")
    if warmup < 0:
        raise ConfigurationError("warmup must be >= 0")
    if _other_threads():
        raise ConfigurationError("latency_bench needs an exclusive single-threaded process")
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(iters):
            start = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - start) * 1e3)
    finally:
        torch.set_num_threads(prev_threads)
    return LatencyStats(label, statistics.median(samples), _percentile(samples, 0.1), _percentile(samples, 0.9),
                        tuple(samples))


def write_latency_csv(rows: list[LatencyStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "median_ms", "p10", "p90"])
        for r in rows:
            writer.writerow([r.label, f"{r.median_ms:.4f}", f"{r.p10:.4f}", f"{r.p90:.4f}"])
