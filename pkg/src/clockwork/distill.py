"""Teacher training, unrolled trajectory datasets and adaptor distillation (unrolled and regular)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import numerics as nx
from .adaptor import Adaptor
from .clockwork import ClockSchedule, make_clock
from .data import ToyDataset
from .errors import ConfigurationError, NumericError
from .parallel import parallel_map
from .sampler import NoiseSchedule, TimestepGrid, Trajectory, initial_noise, make_grid, sample_loop
from .unet import SplitUNet, UNetConfig, build_unet

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# teacher


@dataclass
class BaseTrainResult:
    model: SplitUNet
    losses: list[tuple[int, int, float]]  # (epoch, step, loss)


def train_base(
    config: UNetConfig,
    sched: NoiseSchedule,
    steps: int,
    seed: int,
    batch_size: int = 32,
    lr: float = 5e-4,
    cond_dropout: float = 0.1,
    dataset: ToyDataset | None = None,
    epoch_images: int = 4096,
    log_every: int = 100,
    on_step: Callable[[int, float], None] | None = None,
    decay: bool = True,
) -> BaseTrainResult:
    """Epsilon-matching DDPM training with classifier-free condition dropout.

    With ``decay`` the learning rate follows a cosine from ``lr`` down to ``lr / 10``.
    """
    torch.manual_seed(seed)
    model = build_unet(config, seed)
    dataset = dataset or ToyDataset(config.image_size, max(config.num_classes, 1))
    gen = torch.Generator().manual_seed(seed + 1)
    opt = nx.AdamState(lr=lr)
    params = dict(model.named_parameters())
    alpha_bars = torch.as_tensor(sched.alpha_bars, dtype=torch.float32)
    losses: list[tuple[int, int, float]] = []
    recent: list[float] = []
    for step in range(steps):
        if decay:
            opt.lr = lr * (0.1 + 0.45 * (1 + math.cos(math.pi * step / max(steps - 1, 1))))
        x0, labels = dataset.sample(batch_size, gen)
        t = torch.randint(0, sched.T_train, (batch_size,), generator=gen)
        noise = torch.randn(x0.shape, generator=gen)
        ab = alpha_bars[t][:, None, None, None]
        x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * noise
        if config.num_classes:
            drop = torch.rand(batch_size, generator=gen) < cond_dropout
            labels = torch.where(drop, torch.full_like(labels, config.null_class), labels)
        else:
            labels = None
        model.zero_grad(set_to_none=True)
        eps = model.predict_noise(x_t, t, labels).eps
        loss = (eps - noise).square().mean()
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"base training diverged at step {step}; recent losses {recent[-5:]}")
        loss.backward()
        nx.adam_step(opt, params)
        recent.append(value)
        losses.append((step * batch_size // epoch_images, step, value))
        if on_step is not None:
            on_step(step, value)
        if log_every and step % log_every == 0:
            log.info("base step %d loss %.5f", step, value)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return BaseTrainResult(model, losses)


def write_loss_csv(losses: Sequence[tuple[int, int, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        for epoch, step, loss in losses:
            writer.writerow([epoch, step, f"{loss:.8g}"])


def smoothed(values: Sequence[float], window: int) -> list[float]:
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


# ---------------------------------------------------------------------------
# trajectories


def teacher_noise_fn(teacher: SplitUNet):
    def fn(x, t, labels, step):
        return teacher.predict_noise(x, t, labels)
    return fn


def _unroll_chunk(task) -> Trajectory:
    teacher, sched, grid, solver, chunk, seed, w = task
    cfg = teacher.config
    shape = (len(chunk), cfg.in_channels, cfg.image_size, cfg.image_size)
    _, traj = sample_loop(teacher_noise_fn(teacher), sched, grid, solver, shape, seed, labels=chunk, w=w,
                          null_label=cfg.null_class if cfg.num_classes else None)
    return traj


def unroll_dataset(
    teacher: SplitUNet,
    sched: NoiseSchedule,
    grid: TimestepGrid,
    solver: str,
    labels: torch.Tensor,
    seed: int,
    w: float = 3.0,
    batch_size: int = 64,
    workers: int = 1,
) -> list[Trajectory]:
    """Teacher sampling runs from pure noise, one batched Trajectory per chunk of ``labels``.

    Every record carries the (guidance-doubled) ``r_in`` / ``r_out`` of that step.
    Chunking is fixed by ``batch_size``, so ``workers`` never changes the result.
    """
    tasks = [(teacher, sched, grid, solver, labels[start:start + batch_size], seed * 1000 + k, w)
             for k, start in enumerate(range(0, len(labels), batch_size))]
    return parallel_map(_unroll_chunk, tasks, workers)


@dataclass
class PairSet:
    """Flattened adaptor training pairs: predict ``target`` from (r_in, prev, t, label)."""

    r_in: torch.Tensor
    prev: torch.Tensor
    target: torch.Tensor
    t: torch.Tensor
    labels: torch.Tensor | None

    def __len__(self) -> int:
        return self.r_in.shape[0]

    def subset(self, idx: torch.Tensor) -> "PairSet":
        return PairSet(self.r_in[idx], self.prev[idx], self.target[idx], self.t[idx],
                       None if self.labels is None else self.labels[idx])


def trajectory_pairs(trajectories: Sequence[Trajectory], clock: ClockSchedule) -> PairSet:
    """Collect (record_i, record_{i-1}) pairs at the steps where the clock fires."""
    parts: dict[str, list[torch.Tensor]] = {"r_in": [], "prev": [], "target": [], "t": [], "labels": []}
    for traj in trajectories:
        recs = traj.records
        for k, rec in enumerate(recs):
            if not clock(rec.step):
                continue
            if k == 0:
                raise ConfigurationError("clock fires on the first step")
            n = rec.r_in.shape[0]
            parts["r_in"].append(rec.r_in)
            parts["prev"].append(recs[k - 1].r_out)
            parts["target"].append(rec.r_out)
            parts["t"].append(torch.full((n,), rec.t, dtype=torch.long))
            if traj.model_labels is not None:
                parts["labels"].append(torch.as_tensor(traj.model_labels))
    if not parts["r_in"]:
        raise ConfigurationError("clock never fires on this grid; nothing to train on")
    cat = {k: torch.cat(v) if v else None for k, v in parts.items()}
    return PairSet(cat["r_in"], cat["prev"], cat["target"], cat["t"], cat["labels"])


# ---------------------------------------------------------------------------
# loss and optimisation


def adaptor_step_loss(adaptor: Adaptor, r_in: torch.Tensor, r_out_prev: torch.Tensor | None,
                      r_out_target: torch.Tensor, t_emb: torch.Tensor, c_emb: torch.Tensor | None) -> torch.Tensor:
    """Batch mean of the per-sample L2 norm between target and adaptor prediction."""
    pred = adaptor(r_in, r_out_prev, t_emb, c_emb)
    if pred.shape != r_out_target.shape:
        raise ConfigurationError(f"prediction {tuple(pred.shape)} vs target {tuple(r_out_target.shape)}")
    return torch.linalg.vector_norm((r_out_target - pred).flatten(1), dim=1).mean()


def pair_loss(teacher: SplitUNet, adaptor: Adaptor, pairs: PairSet) -> torch.Tensor:
    with torch.no_grad():
        t_emb, c_emb = teacher.embed(pairs.t, pairs.labels, len(pairs))
    return adaptor_step_loss(adaptor, pairs.r_in, pairs.prev, pairs.target, t_emb, c_emb)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-4
    trajectories_per_epoch: int = 512
    regenerate: bool = False
    num_steps: int = 8
    solver: str = "dpmpp2m"
    clock: int | str | list[int] = 2
    guidance: float = 3.0
    seed: int = 0
    workers: int = 1

    def grid(self, sched: NoiseSchedule) -> TimestepGrid:
        return make_grid(self.num_steps, sched.T_train)

    def operating_point(self) -> dict:
        clock = make_clock(self.clock)
        return {"num_steps": self.num_steps, "solver": self.solver, "clock": clock.to_json(),
                "guidance": self.guidance}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptorTrainResult:
    adaptor: Adaptor
    losses: list[tuple[int, int, float]]
    operating_point: dict = field(default_factory=dict)


def _frozen_digest(model: torch.nn.Module) -> list[torch.Tensor]:
    return [p.detach().clone() for p in model.parameters()]


def _prepare(teacher: SplitUNet, adaptor: Adaptor) -> tuple[nx.AdamState, dict]:
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    adaptor.train()
    params = dict(adaptor.named_parameters())
    for p in params.values():
        p.requires_grad_(True)
    if not params:
        raise ConfigurationError("adaptor has no parameters to train")
    return nx.AdamState(), params


def _optimise(teacher: SplitUNet, adaptor: Adaptor, opt: nx.AdamState, params: dict, batch: PairSet) -> float:
    adaptor.zero_grad(set_to_none=True)
    loss = pair_loss(teacher, adaptor, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError("adaptor loss is not finite")
    loss.backward()
    nx.adam_step(opt, params)
    return value


def class_conditions(n: int, num_classes: int, seed: int) -> torch.Tensor:
    """Class ids used as the 'prompt set' for unrolled training: no images involved."""
    gen = torch.Generator().manual_seed(seed)
    return torch.randint(0, max(num_classes, 1), (n,), generator=gen)


def train_adaptor_unrolled(
    teacher: SplitUNet,
    adaptor: Adaptor,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    conditions: torch.Tensor | None = None,
    trajectories: list[Trajectory] | None = None,
) -> AdaptorTrainResult:
    """Distil the adaptor on teacher trajectories unrolled from pure noise.

    Trajectories are regenerated every epoch when ``cfg.regenerate`` is set,
    otherwise generated once (or taken from ``trajectories``).
    """
    clock = make_clock(cfg.clock)
    grid = cfg.grid(sched)
    opt, params = _prepare(teacher, adaptor)
    opt.lr = cfg.lr
    before = _frozen_digest(teacher)
    gen = torch.Generator().manual_seed(cfg.seed)
    losses: list[tuple[int, int, float]] = []
    pairs = None
    step = 0
    for epoch in range(cfg.epochs):
        if pairs is None or cfg.regenerate:
            if trajectories is None or cfg.regenerate:
                conds = conditions if conditions is not None and not cfg.regenerate else class_conditions(
                    cfg.trajectories_per_epoch, teacher.config.num_classes, cfg.seed * 7919 + epoch)
                trajectories = unroll_dataset(teacher, sched, grid, cfg.solver, conds, cfg.seed * 31 + epoch,
                                              w=cfg.guidance, workers=cfg.workers)
            pairs = trajectory_pairs(trajectories, clock)
        order = torch.randperm(len(pairs), generator=gen)
        for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            value = _optimise(teacher, adaptor, opt, params, pairs.subset(order[start:start + cfg.batch_size]))
            losses.append((epoch, step, value))
            step += 1
        log.info("unrolled epoch %d mean loss %.5f", epoch,
                 sum(l for e, _, l in losses if e == epoch) / max(1, sum(1 for e, _, _ in losses if e == epoch)))
    _finish(teacher, adaptor, before)
    return AdaptorTrainResult(adaptor, losses, cfg.operating_point())


def regular_pairs(teacher: SplitUNet, sched: NoiseSchedule, grid: TimestepGrid, clock: ClockSchedule,
                  images: torch.Tensor, labels: torch.Tensor | None, gen: torch.Generator) -> PairSet:
    """Forward-noise images to consecutive grid timesteps and read the teacher's representations.

    For an adaptor step ``i`` the previous-step input comes from ``grid.steps[i-2]``
    and the target from ``grid.steps[i-1]``; both latents share one noise draw.
    """
    steps = clock.adaptor_steps(len(grid))
    if not steps:
        raise ConfigurationError("clock never fires on this grid")
    n = images.shape[0]
    pick = torch.tensor(steps)[torch.randint(0, len(steps), (n,), generator=gen)]
    t_cur = torch.tensor(grid.steps)[pick - 1]
    t_prev = torch.tensor(grid.steps)[pick - 2]
    noise = torch.randn(images.shape, generator=gen)
    ab = torch.as_tensor(sched.alpha_bars, dtype=torch.float32)

    def noised(t):
        a = ab[t][:, None, None, None]
        return a.sqrt() * images + (1 - a).sqrt() * noise

    with torch.no_grad():
        prev = teacher.predict_noise(noised(t_prev), t_prev, labels).r_out
        cur = teacher.predict_noise(noised(t_cur), t_cur, labels)
    return PairSet(cur.r_in, prev, cur.r_out, t_cur, labels)


def train_adaptor_regular(
    teacher: SplitUNet,
    adaptor: Adaptor,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    dataset: ToyDataset,
    total_steps: int | None = None,
    uncond_fraction: float = 0.5,
) -> AdaptorTrainResult:
    """Conventional step distillation: latents built by forward-noising dataset images.

    ``total_steps`` defaults to the optimiser step count of the unrolled scheme
    under the same config, so both schemes see the same number of updates.
    """
    clock = make_clock(cfg.clock)
    grid = cfg.grid(sched)
    opt, params = _prepare(teacher, adaptor)
    opt.lr = cfg.lr
    before = _frozen_digest(teacher)
    gen = torch.Generator().manual_seed(cfg.seed)
    if total_steps is None:
        per_epoch = (cfg.trajectories_per_epoch * 2 * len(clock.adaptor_steps(len(grid)))) // cfg.batch_size
        total_steps = cfg.epochs * per_epoch
    per_epoch = max(1, total_steps // max(cfg.epochs, 1))
    null = teacher.config.null_class
    losses: list[tuple[int, int, float]] = []
    for step in range(total_steps):
        images, labels = dataset.sample(cfg.batch_size, gen)
        if teacher.config.num_classes:
            drop = torch.rand(cfg.batch_size, generator=gen) < uncond_fraction
            labels = torch.where(drop, torch.full_like(labels, null), labels)
        else:
            labels = None
        batch = regular_pairs(teacher, sched, grid, clock, images, labels, gen)
        value = _optimise(teacher, adaptor, opt, params, batch)
        losses.append((step // per_epoch, step, value))
    _finish(teacher, adaptor, before)
    return AdaptorTrainResult(adaptor, losses, cfg.operating_point())


def _finish(teacher: SplitUNet, adaptor: Adaptor, before: list[torch.Tensor]) -> None:
    for a, b in zip(before, teacher.parameters()):
        if not torch.equal(a, b):
            raise RuntimeError("teacher parameters changed during adaptor training")
    adaptor.eval()
    for p in adaptor.parameters():
        p.requires_grad_(False)


@torch.no_grad()
def held_out_loss(teacher: SplitUNet, adaptor: Adaptor, pairs: PairSet, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for start in range(0, len(pairs), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(pairs)))
        sub = pairs.subset(idx)
        total += float(pair_loss(teacher, adaptor, sub)) * len(sub)
        count += len(sub)
    return total / count
