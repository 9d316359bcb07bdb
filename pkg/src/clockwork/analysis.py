"""Feature-perturbation robustness sweeps, trajectory distances and desk-scale quality proxies."""

from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, StatisticalValidityError
from .sampler import Trajectory

DEFAULT_ALPHAS = (1.0, 0.7, 0.3, 0.0)
RF_SEED = 20240917  # feature net seed; fixed so scores compare across runs and machines
RF_DIM = 64
RF_MIN_SAMPLES = 64


class DegenerateFeatureWarning(UserWarning):
    pass


def perturb_feature(f: torch.Tensor, alpha: float, seed: int | torch.Generator,
                    per_channel: bool = False) -> torch.Tensor:
    """Noise-mix a feature map while keeping its mean and variance.

    f <- mu + sqrt(alpha) (f - mu) + sqrt(1 - alpha) z,  z ~ N(0, sigma^2).
    Statistics are over the whole tensor, or per channel (dim 1) with ``per_channel``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    if not torch.isfinite(f).all():
        raise ConfigurationError("cannot perturb a non-finite feature")
    if alpha == 1.0:
        return f
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    if per_channel:
        if f.dim() < 2:
            raise ConfigurationError("per-channel statistics need a channel axis")
        dims = [d for d in range(f.dim()) if d != 1]
        mu = f.mean(dim=dims, keepdim=True)
        sigma = f.var(dim=dims, keepdim=True, unbiased=False).sqrt()
    else:
        mu = f.mean()
        sigma = f.var(unbiased=False).sqrt()
    if bool((sigma == 0).any()):
        warnings.warn("feature has zero variance; perturbation reduces to the mean", DegenerateFeatureWarning)
    z = torch.randn(f.shape, generator=gen, dtype=f.dtype) * sigma
    return mu + math.sqrt(alpha) * (f - mu) + math.sqrt(1.0 - alpha) * z


@dataclass(frozen=True)
class PerturbSpec:
    site: str
    alpha: float
    start_step: int  # perturbation applies at steps i > start_step
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.start_step < 0:
            raise ConfigurationError("start step must be >= 0")


def _cell_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def perturbation_hooks(spec: PerturbSpec, sample_seeds: Sequence[int], sites: Iterable[str],
                       per_channel: bool = False) -> Callable[[int], Callable | None]:
    """``hook_for_step`` factory for :class:`ClockworkDenoiser`.

    Each sample in the batch gets its own statistics and noise, seeded by
    (spec seed, sample seed, step, site), so the noise a sample receives does not
    depend on which other samples share its batch.
    Rows of a guidance-doubled batch share their sample's noise.
    """
    known = set(sites)
    if spec.site not in known:
        raise ConfigurationError(f"unknown site {spec.site!r}; exposed sites are {sorted(known)}")
    n = len(sample_seeds)

    def for_step(i: int):
        if i <= spec.start_step or spec.alpha == 1.0:
            return None

        def hook(site: str, f: torch.Tensor) -> torch.Tensor:
            if site != spec.site:
                return f
            if f.shape[0] % n:
                raise ConfigurationError(f"batch {f.shape[0]} is not a multiple of {n} samples")
            rows = []
            for r in range(f.shape[0]):
                seed = _cell_seed(spec.seed, sample_seeds[r % n], i, site)
                rows.append(perturb_feature(f[r:r + 1], spec.alpha, seed, per_channel))
            return torch.cat(rows)

        return hook

    return for_step


def unet_sites(config) -> list[str]:
    """Names of the tensors a hook can intercept, for this config."""
    k = config.cutoff_stage
    sites = [f"down{s}" for s in range(config.num_stages)] + ["mid"]
    sites += [f"up{s}" for s in range(config.num_stages)]
    sites += [f"skip{j}" for j in range(3 * k)] + ["r_in", "r_out"]
    return sites


@dataclass
class SweepRow:
    site: str
    alpha: float
    start_step: int
    seed: int
    l2: float


SWEEP_CHUNK = 8  # seeds per generation batch; fixed so worker count never changes results


def _sweep_chunk(task) -> list[SweepRow]:
    from .clockwork import ClockworkDenoiser  # avoid an import cycle
    from .sampler import initial_noise, sample_loop

    model, sched, grid, solver, sites, alphas, start_steps, seeds, labels, w, per_channel = task
    cfg = model.config
    exposed = unet_sites(cfg)
    shape = (len(seeds), cfg.in_channels, cfg.image_size, cfg.image_size)
    noise = torch.cat([initial_noise((1,) + shape[1:], s) for s in seeds])
    null = cfg.null_class if cfg.num_classes else None

    def run(hook_for_step):
        den = ClockworkDenoiser(model, hook_for_step=hook_for_step)
        x, _ = sample_loop(den, sched, grid, solver, shape, 0, labels=labels, w=w, null_label=null,
                           record=False, noise=noise)
        return x

    ref = run(None)
    rows = []
    for site in sites:
        for alpha in alphas:
            for s in start_steps:
                if alpha == 1.0 or s >= len(grid):
                    x = ref
                else:
                    spec = PerturbSpec(site, alpha, s, 0)
                    x = run(perturbation_hooks(spec, seeds, exposed, per_channel))
                d = torch.linalg.vector_norm((x - ref).flatten(1), dim=1)
                rows.extend(SweepRow(site, alpha, s, seed, float(v)) for seed, v in zip(seeds, d))
    return rows


def perturb_sweep(model, sched, grid, solver: str, sites: Sequence[str], alphas: Sequence[float],
                  start_steps: Sequence[int], seeds: Sequence[int], labels: torch.Tensor | None = None,
                  w: float = 3.0, per_channel: bool = False, workers: int = 1) -> list[SweepRow]:
    """Final-output L2 between perturbed and unperturbed generations for every cell.

    Seed ``k`` starts from ``initial_noise`` seeded by ``k``; ``labels`` (one per seed)
    default to ``seed % num_classes``.  Rows are ordered by (site, alpha, start_step, seed).
    """
    from .parallel import parallel_map

    cfg = model.config
    exposed = unet_sites(cfg)
    for site in sites:
        if site not in exposed:
            raise ConfigurationError(f"unknown site {site!r}; exposed sites are {exposed}")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {a}")
    seeds = list(seeds)
    if labels is None and cfg.num_classes:
        labels = torch.tensor([s % cfg.num_classes for s in seeds])
    tasks = []
    for k in range(0, len(seeds), SWEEP_CHUNK):
        chunk_labels = None if labels is None else labels[k:k + SWEEP_CHUNK]
        tasks.append((model, sched, grid, solver, list(sites), list(alphas), list(start_steps),
                      seeds[k:k + SWEEP_CHUNK], chunk_labels, w, per_channel))
    rows = [r for part in parallel_map(_sweep_chunk, tasks, workers) for r in part]
    order = {(site, a, s): j for j, (site, a, s) in enumerate(
        (site, a, s) for site in sites for a in alphas for s in start_steps)}
    seed_pos = {s: j for j, s in enumerate(seeds)}
    return sorted(rows, key=lambda r: (order[(r.site, r.alpha, r.start_step)], seed_pos[r.seed]))


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site", "alpha", "start_step", "seed", "l2"])
        for r in rows:
            writer.writerow([r.site, r.alpha, r.start_step, r.seed, f"{r.l2:.8g}"])


# ---------------------------------------------------------------------------
# distances


def l2_curve(a: Trajectory, b: Trajectory) -> np.ndarray:
    """Per-step L2 distance between the latents of two trajectories on the same grid."""
    if len(a) != len(b):
        raise ConfigurationError(f"trajectories have {len(a)} and {len(b)} steps")
    out = []
    for ra, rb in zip(a.records, b.records):
        if ra.t != rb.t:
            raise ConfigurationError(f"grids differ at step {ra.step}: t={ra.t} vs t={rb.t}")
        out.append(float(torch.linalg.vector_norm((ra.x_t - rb.x_t).double())))
    return np.array(out)


def mean_pixel_l2(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean over pixels of the RGB-vector distance, on the [0, 1] image scale."""
    if a.shape != b.shape:
        raise ConfigurationError(f"image sets differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = (a.double() - b.double()) / 2
    return float(torch.linalg.vector_norm(diff, dim=1).mean())


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for [-1, 1] images (peak-to-peak 2)."""
    if a.shape != b.shape:
        raise ConfigurationError("psnr needs paired images of equal shape")
    mse = float((a.double() - b.double()).square().mean())
    return math.inf if mse == 0 else 10 * math.log10(4.0 / mse)


# ---------------------------------------------------------------------------
# RF-FID


class RandomFeatures:
    """Fixed random 3-layer conv net; global average pooled 64-d features."""

    def __init__(self, in_channels: int = 3, seed: int = RF_SEED, width: int = RF_DIM):
        gen = torch.Generator().manual_seed(seed)
        dims = [in_channels, 32, 48, width]
        self.weights = []
        for c_in, c_out in zip(dims, dims[1:]):
            w = torch.randn((c_out, c_in, 3, 3), generator=gen, dtype=torch.float64) / math.sqrt(9 * c_in)
            b = 0.1 * torch.randn(c_out, generator=gen, dtype=torch.float64)
            self.weights.append((w, b))

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        h = images.double()
        for j, (w, b) in enumerate(self.weights):
            h = F.conv2d(h, w, b, stride=1 if j == 0 else 2, padding=1)
            h = F.leaky_relu(h, 0.2) if j < len(self.weights) - 1 else h
        return h.mean(dim=(2, 3))


_features: dict[int, RandomFeatures] = {}


def rf_features(images: torch.Tensor) -> np.ndarray:
    c = images.shape[1]
    if c not in _features:
        _features[c] = RandomFeatures(c)
    return _features[c](images).numpy()


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The cross term is evaluated as Tr((S1^{1/2} S2 S1^{1/2})^{1/2}), which has the
    same trace and stays symmetric, so an eigendecomposition suffices.
    """
    s1 = _sqrtm_psd(cov1)
    cross = _sqrtm_psd(s1 @ cov2 @ s1)
    d = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(cross))
    return max(d, 0.0)


def feature_stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if feats.shape[0] < RF_MIN_SAMPLES:
        raise StatisticalValidityError(f"need at least {RF_MIN_SAMPLES} samples, got {feats.shape[0]}")
    return feats.mean(axis=0), np.cov(feats, rowvar=False)


def rf_fid(samples_a: torch.Tensor, samples_b: torch.Tensor) -> float:
    """Frechet distance between random-feature statistics of two image sets."""
    for s in (samples_a, samples_b):
        if s.shape[0] < RF_MIN_SAMPLES:
            raise StatisticalValidityError(f"need at least {RF_MIN_SAMPLES} samples per set, got {s.shape[0]}")
    if samples_a.shape[0] == samples_b.shape[0] and torch.equal(samples_a, samples_b):
        return 0.0
    mu1, c1 = feature_stats(rf_features(samples_a))
    mu2, c2 = feature_stats(rf_features(samples_b))
    return frechet_distance(mu1, c1, mu2, c2)


@dataclass
class QualityReport:
    rf_fid: float
    mean_l2: float | None = None
    psnr: float | None = None

    def to_json(self) -> dict:
        return {"rf_fid": self.rf_fid, "mean_l2": self.mean_l2, "psnr": self.psnr}


def quality_report(samples: torch.Tensor, reference: torch.Tensor, paired: torch.Tensor | None = None) -> QualityReport:
    """RF-FID of ``samples`` against ``reference``; L2 and PSNR against ``paired`` outputs when given."""
    report = QualityReport(rf_fid(samples, reference))
    if paired is not None:
        report.mean_l2 = mean_pixel_l2(samples, paired)
        report.psnr = psnr(samples, paired)
    return report
