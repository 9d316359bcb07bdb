"""Run directories and the end-to-end workflows behind each CLI subcommand.

Layout: ``<root>/<name>/{config.json, ckpt/, samples/, csv/}``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from . import analysis, cost
from .adaptor import Adaptor, build_adaptor
from .clockwork import generate, make_clock
from .config import RunConfig
from .data import ToyDataset, reference_set
from .distill import (TrainConfig, train_adaptor_regular, train_adaptor_unrolled, train_base, write_loss_csv,
                      class_conditions)
from .errors import ConfigurationError, ProtocolError
from .sampler import make_grid
from .store import load_checkpoint, save_checkpoint, write_ppm
from .unet import SplitUNet, build_unet

log = logging.getLogger(__name__)


@dataclass
class RunDir:
    root: Path
    name: str

    @property
    def path(self) -> Path:
        return Path(self.root) / self.name

    def sub(self, part: str) -> Path:
        p = self.path / part
        p.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def ckpt(self) -> Path:
        return self.sub("ckpt")

    @property
    def samples(self) -> Path:
        return self.sub("samples")

    @property
    def csv(self) -> Path:
        return self.sub("csv")

    def write_config(self, cfg: RunConfig) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        out = self.path / "config.json"
        out.write_text(cfg.to_json() + "\n")
        return out


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)


def _train_config(cfg: RunConfig, workers: int = 1) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr,
                       trajectories_per_epoch=t.trajectories_per_epoch, regenerate=t.regenerate,
                       num_steps=cfg.sampler.steps, solver=cfg.sampler.solver, clock=cfg.clock.schedule,
                       guidance=cfg.sampler.guidance, seed=cfg.seed, workers=workers)


def operating_point(cfg: RunConfig) -> dict:
    return _train_config(cfg).operating_point()


# ---------------------------------------------------------------------------
# loading


def load_teacher(path: str | Path, require_trained: bool = False) -> tuple[SplitUNet, dict]:
    model, prov = load_checkpoint(path)
    if not isinstance(model, SplitUNet):
        raise ConfigurationError(f"{path} is not a UNet checkpoint")
    if require_trained and not prov.get("trained"):
        raise ConfigurationError("checkpoint lacks training provenance")
    return model, prov


def resolve_teacher(cfg: RunConfig, run: RunDir, teacher: str | None, require_trained: bool = False) -> SplitUNet:
    """Explicit path, else the run's own ``ckpt/teacher.cwkt``, else a freshly initialised model."""
    path = Path(teacher) if teacher else run.path / "ckpt" / "teacher.cwkt"
    if path.exists():
        model, _ = load_teacher(path, require_trained)
        if model.config != cfg.unet_config():
            raise ConfigurationError(f"teacher {path} was built for a different UNet config")
        return model
    if teacher:
        raise ConfigurationError(f"teacher checkpoint {path} not found")
    if require_trained:
        raise ConfigurationError("checkpoint lacks training provenance")
    log.warning("no teacher checkpoint; using an untrained model initialised from the seed")
    model = build_unet(cfg.unet_config(), cfg.seed)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def check_operating_point(prov: dict, expected: dict, path) -> None:
    got = prov.get("operating_point")
    if got is None:
        raise ConfigurationError(f"adaptor {path} carries no operating point")
    if got != expected:
        raise ConfigurationError(f"adaptor {path} was trained for {got}, requested {expected}")


def resolve_adaptor(cfg: RunConfig, spec: str | None) -> Adaptor | None:
    """``none``, ``identity``, or a path to a trained adaptor checkpoint."""
    if spec in (None, "none"):
        return None
    if spec == "identity":
        return build_adaptor(replace(cfg.adaptor_spec(), kind="identity"), 0)
    path = Path(spec)
    if not path.exists():
        raise ConfigurationError(f"adaptor {spec!r} is neither 'identity', 'none' nor an existing checkpoint")
    adaptor, prov = load_checkpoint(path)
    if not isinstance(adaptor, Adaptor):
        raise ConfigurationError(f"{path} is not an adaptor checkpoint")
    check_operating_point(prov, operating_point(cfg), path)
    return adaptor


# ---------------------------------------------------------------------------
# workflows


def pretrain(cfg: RunConfig, run: RunDir) -> Path:
    if not cfg.dataset.enabled:
        raise ConfigurationError("pretraining needs the image dataset")
    _seed_all(cfg.seed)
    run.write_config(cfg)
    ucfg = cfg.unet_config()
    t = cfg.train
    result = train_base(ucfg, cfg.schedule(), t.base_steps, cfg.seed, batch_size=t.base_batch, lr=t.base_lr,
                        cond_dropout=t.cond_dropout, dataset=ToyDataset(ucfg.image_size, ucfg.num_classes or 1))
    write_loss_csv(result.losses, run.csv / "pretrain_loss.csv")
    out = run.ckpt / "teacher.cwkt"
    save_checkpoint(result.model, out, {"trained": True, "steps": t.base_steps, "seed": cfg.seed,
                                        "schedule": cfg.sampler.schedule, "T_train": cfg.sampler.T_train})
    return out


def distill(cfg: RunConfig, run: RunDir, teacher: str | None = None, regular: bool = False,
            workers: int = 1, out_name: str = "adaptor.cwkt") -> Path:
    _seed_all(cfg.seed)
    run.write_config(cfg)
    model = resolve_teacher(cfg, run, teacher)
    spec = cfg.adaptor_spec()
    if spec.kind == "identity":
        raise ConfigurationError("the identity adaptor has nothing to train")
    adaptor = build_adaptor(spec, cfg.seed)
    tcfg = _train_config(cfg, workers)
    sched = cfg.schedule()
    if regular:
        if not cfg.dataset.enabled:
            raise ConfigurationError("regular distillation needs the image dataset")
        ucfg = model.config
        result = train_adaptor_regular(model, adaptor, sched, tcfg, ToyDataset(ucfg.image_size, ucfg.num_classes or 1))
    else:
        conds = class_conditions(tcfg.trajectories_per_epoch, model.config.num_classes, cfg.seed)
        result = train_adaptor_unrolled(model, adaptor, sched, tcfg, conditions=conds)
    write_loss_csv(result.losses, run.csv / (Path(out_name).stem + "_loss.csv"))
    out = run.ckpt / out_name
    save_checkpoint(result.adaptor, out, {"trained": True, "scheme": "regular" if regular else "unrolled",
                                          "operating_point": result.operating_point, "seed": cfg.seed,
                                          "train": tcfg.to_dict() | {"workers": None}})
    return out


def _labels(cfg: RunConfig, n: int) -> torch.Tensor | None:
    k = cfg.dataset.num_classes
    return torch.arange(n) % k if k else None


def sample_images(cfg: RunConfig, model: SplitUNet, adaptor: Adaptor | None, n: int | None = None,
                  clock=None, batch: int = 64):
    """Generate ``n`` images in fixed batches; returns (images in [-1, 1], last FlopReport)."""
    n = n or cfg.sampler.num_samples
    clock = make_clock(cfg.clock.schedule if clock is None else clock) if adaptor is not None else make_clock(None)
    sched = cfg.schedule()
    grid = make_grid(cfg.sampler.steps, sched.T_train)
    labels = _labels(cfg, n)
    outs, report = [], None
    for k, start in enumerate(range(0, n, batch)):
        chunk = None if labels is None else labels[start:start + batch]
        x, _, report, _ = generate(model, adaptor, clock, sched, grid, cfg.sampler.solver, chunk,
                                   cfg.seed * 7919 + k, w=cfg.sampler.guidance, record=False)
        outs.append(x)
    return torch.cat(outs).clamp(-1, 1), report


def sample(cfg: RunConfig, run: RunDir, teacher: str | None = None, adaptor: str | None = None) -> dict:
    _seed_all(cfg.seed)
    run.write_config(cfg)
    model = resolve_teacher(cfg, run, teacher)
    ad = resolve_adaptor(cfg, adaptor)
    images, report = sample_images(cfg, model, ad)
    label = "baseline" if ad is None else f"clock{make_clock(cfg.clock.schedule).label()}"
    write_ppm((images + 1) / 2, run.samples / f"{label}.ppm")
    save_checkpoint_images(images, run.samples / f"{label}.cwkt", cfg)
    (run.csv / f"{label}_flops.json").write_text(report.to_json() + "\n")
    return {"images": str(run.samples / f"{label}.ppm"), "flops_per_image": report.total}


def save_checkpoint_images(images: torch.Tensor, path: Path, cfg: RunConfig) -> None:
    from .store import write_archive

    write_archive(path, {"images": images.float()}, {"kind": "images", "seed": cfg.seed})


def perturb(cfg: RunConfig, run: RunDir, teacher: str | None = None, workers: int = 1) -> Path:
    _seed_all(cfg.seed)
    run.write_config(cfg)
    model = resolve_teacher(cfg, run, teacher)
    sched = cfg.schedule()
    a = cfg.analysis
    seeds = [cfg.seed * 1000 + j for j in range(a.num_seeds)]
    rows = analysis.perturb_sweep(model, sched, make_grid(cfg.sampler.steps, sched.T_train), cfg.sampler.solver,
                                  a.sites, a.alphas, a.start_steps, seeds, w=cfg.sampler.guidance, workers=workers)
    out = run.csv / "perturb.csv"
    analysis.write_sweep_csv(rows, out)
    return out


def profile(cfg: RunConfig, run: RunDir, latency: bool = True) -> dict:
    run.write_config(cfg)
    ucfg = cfg.unet_config()
    spec = cfg.adaptor_spec()
    clock = make_clock(cfg.clock.schedule)
    guided = cfg.sampler.guidance != 1.0 and ucfg.num_classes > 0
    report = cost.pipeline_flops(ucfg, spec, clock, cfg.sampler.steps, guidance=guided)
    (run.csv / "flops.json").write_text(report.to_json() + "\n")
    out = {"flops": json.loads(report.to_json())}
    if latency:
        model = build_unet(ucfg, cfg.seed).eval()
        adaptor = build_adaptor(spec, cfg.seed).eval()
        sched = cfg.schedule()
        grid = make_grid(cfg.sampler.steps, sched.T_train)
        labels = _labels(cfg, 1)
        rows = []
        for name, ad, clk in (("baseline", None, make_clock(None)), (f"clock{clock.label()}", adaptor, clock)):
            fn = lambda ad=ad, clk=clk: generate(model, ad, clk, sched, grid, cfg.sampler.solver, labels, cfg.seed,
                                                 w=cfg.sampler.guidance, record=False)
            rows.append(cost.latency_bench(fn, cfg.cost.latency_warmup, cfg.cost.latency_iters, name))
        cost.write_latency_csv(rows, run.csv / "latency.csv")
        out["latency"] = {r.label: r.median_ms for r in rows}
    return out


def compare(cfg: RunConfig, run: RunDir, teacher: str | None = None, adaptor: str | None = "identity") -> dict:
    _seed_all(cfg.seed)
    run.write_config(cfg)
    model = resolve_teacher(cfg, run, teacher, require_trained=True)
    ad = resolve_adaptor(cfg, adaptor)
    if ad is None:
        raise ProtocolError("compare needs an adaptor to pair with the baseline")
    n = max(cfg.sampler.num_samples, analysis.RF_MIN_SAMPLES)
    base, base_report = sample_images(cfg, model, None, n)
    fast, fast_report = sample_images(cfg, model, ad, n)
    ref, _ = reference_set(cfg.analysis.reference_size, model.config.image_size)
    result = {
        "rf_fid_baseline": analysis.rf_fid(base, ref),
        "rf_fid_clockwork": analysis.rf_fid(fast, ref),
        "mean_l2": analysis.mean_pixel_l2(fast, base),
        "psnr": analysis.psnr(fast, base),
        "flops_baseline": base_report.total,
        "flops_clockwork": fast_report.total,
        "savings_fraction": fast_report.savings_fraction,
    }
    (run.csv / "compare.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    write_ppm((base + 1) / 2, run.samples / "compare_baseline.ppm")
    write_ppm((fast + 1) / 2, run.samples / "compare_clockwork.ppm")
    return result
