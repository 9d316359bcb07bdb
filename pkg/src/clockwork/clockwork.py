"""Clock schedules and the gated denoiser that alternates the low-res core with an adaptor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

import torch

from . import numerics as nx
from .adaptor import Adaptor
from .errors import ConfigurationError, ProtocolError
from .sampler import NoiseSchedule, TimestepGrid, Trajectory, sample_loop
from .unet import FeatureHook, SplitUNet


@dataclass(frozen=True)
class ClockSchedule:
    """C(i) over 1-based step indices: 1 means run the adaptor, 0 the full low-res core.

    ``period=N`` gives C(i) = [i mod N == 0]; ``steps`` lists adaptor steps
    explicitly; ``every_step`` uses the adaptor at every step after the first.
    """

    period: int | None = None
    steps: frozenset[int] | None = None
    every_step: bool = False

    def __call__(self, i: int) -> int:
        if i < 1:
            raise ConfigurationError("step indices are 1-based")
        if self.every_step:
            return int(i > 1)
        if self.period is not None:
            return int(i % self.period == 0)
        if self.steps is not None:
            return int(i in self.steps)
        return 0

    def adaptor_steps(self, num_steps: int) -> list[int]:
        return [i for i in range(1, num_steps + 1) if self(i)]

    @property
    def is_off(self) -> bool:
        return self.period is None and not self.steps and not self.every_step

    def to_json(self):
        if self.every_step:
            return "all"
        if self.period is not None:
            return self.period
        if self.steps:
            return sorted(self.steps)
        return "off"

    def label(self) -> str:
        j = self.to_json()
        return "-".join(map(str, j)) if isinstance(j, list) else str(j)


def make_clock(spec: int | str | Iterable[int] | ClockSchedule | None) -> ClockSchedule:
    """Build a schedule from ``None``/"off", a period N >= 2, "all", or explicit adaptor steps."""
    if isinstance(spec, ClockSchedule):
        return spec
    if spec is None or spec == "off" or spec == 0:
        return ClockSchedule()
    if spec == "all":
        return ClockSchedule(every_step=True)
    if isinstance(spec, str):
        text = spec.strip().strip("{}[]")
        if "," in text:
            spec = [int(p) for p in text.split(",") if p.strip()]
        else:
            try:
                spec = int(text)
            except ValueError:
                raise ConfigurationError(f"cannot parse clock spec {spec!r}") from None
    if isinstance(spec, int):
        if spec < 2:
            raise ConfigurationError(f"clock period {spec} would put the adaptor at step 1")
        return ClockSchedule(period=spec)
    steps = frozenset(int(s) for s in spec)
    if not steps:
        return ClockSchedule()
    if min(steps) < 1:
        raise ConfigurationError("clock steps are 1-based")
    if 1 in steps:
        raise ConfigurationError("step 1 must be a full pass: no cached r_out exists yet")
    return ClockSchedule(steps=steps)


@dataclass
class RepCache:
    r_out: torch.Tensor | None = None
    step: int | None = None


class ClockworkOutput(NamedTuple):
    eps: torch.Tensor
    r_in: torch.Tensor
    r_out: torch.Tensor
    approximated: bool


def clockwork_predict_noise(model: SplitUNet, adaptor: Adaptor | None, cache: RepCache, clock: ClockSchedule,
                            x_t: torch.Tensor, i: int, t: int, labels: torch.Tensor | None,
                            hook: FeatureHook | None = None) -> tuple[ClockworkOutput, RepCache]:
    t_emb, c_emb = model.embed(t, labels, x_t.shape[0], x_t.dtype)
    with nx.op_scope("unet"):
        r_in, skips = model.encode_high(x_t, t_emb, c_emb, hook)
    gated = bool(clock(i))
    if gated:
        if adaptor is None:
            raise ProtocolError(f"clock requests the adaptor at step {i} but none was supplied")
        if adaptor.spec.uses_previous and cache.r_out is None:
            raise ProtocolError(f"adaptor step {i} reached with an empty representation cache")
        r_out = adaptor(r_in, cache.r_out, t_emb, c_emb)
    else:
        with nx.op_scope("unet"):
            r_out = model.run_low(r_in, t_emb, c_emb, hook)
    with nx.op_scope("unet"):
        eps = model.decode_high(r_out, skips, t_emb, c_emb, hook)
    return ClockworkOutput(eps, r_in, r_out, gated), RepCache(r_out, i)


class ClockworkDenoiser:
    """Noise function for :func:`sample_loop` that keeps one cache per generation.

    ``hook_for_step(i)`` may return a feature hook applied at step ``i``.
    """

    def __init__(self, model: SplitUNet, adaptor: Adaptor | None = None, clock: ClockSchedule | None = None,
                 hook_for_step: Callable[[int], FeatureHook | None] | None = None):
        self.model = model
        self.adaptor = adaptor
        self.clock = clock or ClockSchedule()
        self.hook_for_step = hook_for_step
        self.cache = RepCache()
        self.full_passes = 0
        self.adaptor_passes = 0

    def __call__(self, x: torch.Tensor, t: int, labels: torch.Tensor | None, step: int) -> ClockworkOutput:
        hook = self.hook_for_step(step) if self.hook_for_step else None
        out, self.cache = clockwork_predict_noise(self.model, self.adaptor, self.cache, self.clock,
                                                  x, step, t, labels, hook)
        if out.approximated:
            self.adaptor_passes += 1
        else:
            self.full_passes += 1
        return out


def generate(model: SplitUNet, adaptor: Adaptor | None, clock: ClockSchedule, sched: NoiseSchedule,
             grid: TimestepGrid, solver: str, labels: torch.Tensor | None, seed: int, w: float = 3.0,
             record: bool = True):
    """Clock-gated sampling. Returns (x_0, Trajectory, FlopReport, denoiser)."""
    from .cost import pipeline_flops  # cost depends on clockwork's ClockSchedule

    cfg = model.config
    n = 1 if labels is None else len(labels)
    shape = (n, cfg.in_channels, cfg.image_size, cfg.image_size)
    denoiser = ClockworkDenoiser(model, adaptor, clock)
    with torch.no_grad(), nx.count_ops() as counter:
        x0, traj = sample_loop(denoiser, sched, grid, solver, shape, seed, labels=labels, w=w,
                               null_label=cfg.null_class if cfg.num_classes else None, record=record)
    guided = w != 1.0 and labels is not None
    report = pipeline_flops(cfg, adaptor.spec if adaptor is not None else None, clock, len(grid), guidance=guided)
    report.batch = n
    report.instrumented_total = counter.total()
    return x0, traj, report, denoiser
