"""Noise schedules, timestep grids, DDIM / DPM-Solver(++) updates and the guided sampling loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Protocol

import numpy as np
import torch

from .errors import ConfigurationError, OrderingError

SOLVERS = ("ddim", "dpmpp2m", "dpm2m")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T_train(self) -> int:
        return len(self.betas)

    def alpha(self, t: int) -> float:
        return math.sqrt(self.alpha_bars[t])

    def sigma(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bars[t])

    def lam(self, t: int) -> float:
        """Half log-SNR, ln(alpha_t / sigma_t)."""
        return math.log(self.alpha(t)) - math.log(self.sigma(t))


def make_schedule(kind: str = "linear", T_train: int = 1000,
                  beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T_train < 10:
        raise ConfigurationError(f"T_train must be >= 10, got {T_train}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T_train + 1, dtype=np.float64) / T_train
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    alpha_bars = np.cumprod(1.0 - betas)
    sched = NoiseSchedule(kind, betas, alpha_bars)
    if not (np.all(np.diff(alpha_bars) < 0) and np.all((alpha_bars > 0) & (alpha_bars < 1))):
        raise ConfigurationError("schedule violates 0 < alpha_bar < 1, strictly decreasing")
    return sched


@dataclass(frozen=True)
class TimestepGrid:
    """``steps`` are t_1 > ... > t_T; step ``i`` moves from ``steps[i-1]`` to ``targets[i-1]``."""

    steps: tuple[int, ...]
    targets: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.steps)


def make_grid(num_steps: int, T_train: int) -> TimestepGrid:
    """Evenly spaced grid from T_train-1 down to 0; the last step lands on t=0."""
    if num_steps < 1:
        raise ConfigurationError("need at least one sampling step")
    points = [int(round(v)) for v in np.linspace(T_train - 1, 0, num_steps + 1)]
    if any(b >= a for a, b in zip(points, points[1:])):
        raise ConfigurationError(f"{num_steps} steps do not fit in T_train={T_train}")
    return TimestepGrid(tuple(points[:-1]), tuple(points[1:]))


@dataclass
class SamplerState:
    x: torch.Tensor
    history: list[tuple[torch.Tensor, float]] = field(default_factory=list)  # (model output, lambda)
    seed: int = 0


def _check_order(t: int, t_prev: int) -> None:
    if t_prev > t:
        raise OrderingError(f"target timestep {t_prev} is after {t}")


def ddim_step(sched: NoiseSchedule, state: SamplerState, eps_hat: torch.Tensor, t: int, t_prev: int) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from t to t_prev."""
    if eps_hat.shape != state.x.shape:
        raise ConfigurationError("eps_hat shape differs from latent shape")
    _check_order(t, t_prev)
    if t_prev == t:
        return state.x
    a_t, s_t = sched.alpha(t), sched.sigma(t)
    a_p, s_p = sched.alpha(t_prev), sched.sigma(t_prev)
    x0_hat = (state.x - s_t * eps_hat) / a_t
    state.x = a_p * x0_hat + s_p * eps_hat
    return state.x


def dpmpp2m_step(sched: NoiseSchedule, state: SamplerState, x0_hat: torch.Tensor, t: int, t_prev: int) -> torch.Tensor:
    """Second-order multistep exponential integrator in data-prediction form."""
    _check_order(t, t_prev)
    if t_prev == t:
        return state.x
    lam_t, lam_p = sched.lam(t), sched.lam(t_prev)
    h = lam_p - lam_t
    if h <= 0:
        raise OrderingError("log-SNR must increase along the trajectory")
    s_t, s_p, a_p = sched.sigma(t), sched.sigma(t_prev), sched.alpha(t_prev)
    if state.history:
        x0_prev, lam_prev = state.history[-1]
        r = (lam_t - lam_prev) / h
        d = (1 + 1 / (2 * r)) * x0_hat - (1 / (2 * r)) * x0_prev
    else:
        d = x0_hat
    state.x = (s_p / s_t) * state.x - a_p * math.expm1(-h) * d
    state.history = (state.history + [(x0_hat, lam_t)])[-2:]
    return state.x


def dpm2m_step(sched: NoiseSchedule, state: SamplerState, eps_hat: torch.Tensor, t: int, t_prev: int) -> torch.Tensor:
    """Second-order multistep exponential integrator in noise-prediction form (DPM-Solver)."""
    _check_order(t, t_prev)
    if t_prev == t:
        return state.x
    lam_t, lam_p = sched.lam(t), sched.lam(t_prev)
    h = lam_p - lam_t
    if h <= 0:
        raise OrderingError("log-SNR must increase along the trajectory")
    a_t, a_p, s_p = sched.alpha(t), sched.alpha(t_prev), sched.sigma(t_prev)
    if state.history:
        eps_prev, lam_prev = state.history[-1]
        r = (lam_t - lam_prev) / h
        d = (1 + 1 / (2 * r)) * eps_hat - (1 / (2 * r)) * eps_prev
    else:
        d = eps_hat
    state.x = (a_p / a_t) * state.x - s_p * math.expm1(h) * d
    state.history = (state.history + [(eps_hat, lam_t)])[-2:]
    return state.x


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ConfigurationError("guidance branches have different shapes")
    if w == 0:
        return eps_uncond
    if w == 1:
        return eps_cond
    return eps_uncond + w * (eps_cond - eps_uncond)


def clip_eps(sched: NoiseSchedule, x: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
    """Noise estimate consistent with the x_0 estimate clamped to [-1, 1]."""
    a, s = sched.alpha(t), sched.sigma(t)
    x0 = ((x - s * eps) / a).clamp(-1.0, 1.0)
    return (x - a * x0) / s


# ---------------------------------------------------------------------------
# sampling loop


class StepRecord(NamedTuple):
    step: int  # 1-based index on the grid
    t: int
    x_t: torch.Tensor
    r_in: torch.Tensor | None
    r_out: torch.Tensor | None
    approximated: bool


@dataclass
class Trajectory:
    condition: torch.Tensor | None
    seed: int
    records: list[StepRecord] = field(default_factory=list)
    model_labels: torch.Tensor | None = None  # labels of the (possibly doubled) model batch

    def __len__(self) -> int:
        return len(self.records)


class NoiseFn(Protocol):
    def __call__(self, x: torch.Tensor, t: int, labels: torch.Tensor | None, step: int): ...


def _unpack(out) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor | None, bool]:
    if isinstance(out, torch.Tensor):
        return out, None, None, False
    return out.eps, getattr(out, "r_in", None), getattr(out, "r_out", None), bool(getattr(out, "approximated", False))


def initial_noise(shape: tuple[int, ...], seed: int) -> torch.Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed))


@torch.no_grad()
def sample_loop(
    noise_fn: NoiseFn,
    sched: NoiseSchedule,
    grid: TimestepGrid,
    solver: str,
    shape: tuple[int, ...],
    seed: int,
    labels: torch.Tensor | None = None,
    w: float = 1.0,
    null_label: int | None = None,
    record: bool = True,
    noise: torch.Tensor | None = None,
    clip: bool = True,
) -> tuple[torch.Tensor, Trajectory]:
    """Run the solver from pure noise, doubling the batch for guidance when ``w != 1``.

    ``noise_fn(x, t, labels, step)`` returns a tensor or an object with ``eps``
    (and optionally ``r_in``/``r_out``/``approximated``) for the whole batch it is given.
    ``noise`` overrides the seeded starting latent.  With ``clip`` the implied
    x_0 estimate is clamped to the data range [-1, 1] before every update.
    """
    if solver not in SOLVERS:
        raise ConfigurationError(f"unknown solver {solver!r}; choose from {SOLVERS}")
    guided = w != 1.0 and labels is not None
    if guided and null_label is None:
        raise ConfigurationError("guidance needs a null label")
    n = shape[0]
    model_labels = labels
    if guided:
        model_labels = torch.cat([torch.as_tensor(labels), torch.full((n,), null_label, dtype=torch.long)])
    if noise is not None and tuple(noise.shape) != tuple(shape):
        raise ConfigurationError(f"noise shape {tuple(noise.shape)} differs from {tuple(shape)}")
    x_T = noise.clone() if noise is not None else initial_noise(shape, seed)
    state = SamplerState(x_T, seed=seed)
    traj = Trajectory(labels, seed, model_labels=model_labels)
    for i, (t, t_prev) in enumerate(zip(grid.steps, grid.targets), start=1):
        x_in = torch.cat([state.x, state.x]) if guided else state.x
        eps, r_in, r_out, approx = _unpack(noise_fn(x_in, t, model_labels, i))
        if guided:
            eps = cfg_combine(eps[n:], eps[:n], w)
        if clip:
            eps = clip_eps(sched, state.x, eps, t)
        if record:
            traj.records.append(StepRecord(i, t, state.x, r_in, r_out, approx))
        if solver == "ddim":
            ddim_step(sched, state, eps, t, t_prev)
        elif solver == "dpm2m":
            dpm2m_step(sched, state, eps, t, t_prev)
        else:
            x0_hat = (state.x - sched.sigma(t) * eps) / sched.alpha(t)
            dpmpp2m_step(sched, state, x0_hat, t, t_prev)
    return state.x, traj
