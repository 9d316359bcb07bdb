"""Command-line entry point: ``clockwork <command> [flags]``.

Precedence: built-in defaults < ``--config`` file < explicit flags.  Every
command writes the fully resolved config to ``<runs-dir>/<name>/config.json``;
passing that file back with ``--config`` reproduces the run.

Exit codes: 0 success, 2 bad configuration or usage, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import cost, runs
from .config import parse_config, set_path
from .errors import ClockworkError, ConfigurationError, NumericError, ProtocolError, ArchiveError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _clock_arg(text: str):
    text = text.strip()
    if text in ("off", "all"):
        return text
    body = text.strip("{}[]")
    if "," in body:
        return [int(p) for p in body.split(",") if p.strip()]
    return int(body)


# flag dest -> dotted config path
OVERRIDES = {
    "seed": "seed",
    "name": "name",
    "image_size": "dataset.image_size",
    "channels": "unet.channels",
    "steps": "sampler.steps",
    "solver": "sampler.solver",
    "guidance": "sampler.guidance",
    "num_samples": "sampler.num_samples",
    "clock": "clock.schedule",
    "adaptor_kind": "adaptor.kind",
    "adaptor_channels": "adaptor.channels",
    "adaptor_inputs": "adaptor.inputs",
    "train_steps": "train.base_steps",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "trajectories": "train.trajectories_per_epoch",
    "regenerate": "train.regenerate",
    "sites": "analysis.sites",
    "alphas": "analysis.alphas",
    "start_steps": "analysis.start_steps",
    "num_seeds": "analysis.num_seeds",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, help="global seed (mandatory unless given by --config)")
    p.add_argument("--name", help="run name; outputs go to <runs-dir>/<name>/")
    p.add_argument("--runs-dir", default="runs", help="root directory for run outputs (default: runs)")
    p.add_argument("--image-size", type=int)
    p.add_argument("--channels", type=lambda s: [int(c) for c in s.split(",")], help="UNet widths, e.g. 16,32,64")
    p.add_argument("--steps", type=int, help="sampling steps on the inference grid")
    p.add_argument("--solver", choices=["ddim", "dpmpp2m", "dpm2m"])
    p.add_argument("--guidance", type=float, help="classifier-free guidance weight")
    p.add_argument("--clock", type=_clock_arg, help="period N, 'all', 'off' or explicit steps like 2,4,6,8")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clockwork", description="Clockwork diffusion: train, distil, sample and profile.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train the teacher UNet on the toy dataset")
    _common(p)
    p.add_argument("--train-steps", type=int, help="optimiser steps")

    p = sub.add_parser("distill", help="train an adaptor on unrolled teacher trajectories")
    _common(p)
    p.add_argument("--teacher", help="teacher checkpoint (default: the run's ckpt/teacher.cwkt)")
    p.add_argument("--regular", action="store_true", help="forward-noise dataset images instead of unrolling")
    p.add_argument("--adaptor-kind", choices=["resnet", "unet_light"])
    p.add_argument("--adaptor-channels", type=int)
    p.add_argument("--adaptor-inputs", type=lambda s: s.split(","),
                   help="subset of r_in,r_out_prev,t_emb,c_emb (drop r_out_prev for pure model distillation)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--trajectories", type=int, help="trajectories per epoch")
    p.add_argument("--regenerate", action="store_true", default=None, help="fresh trajectories every epoch")
    p.add_argument("--no-images", action="store_true", help="disable the image dataset (class ids only)")
    p.add_argument("--workers", type=int, default=1, help="processes for trajectory generation")
    p.add_argument("--out", default="adaptor.cwkt", help="checkpoint file name inside ckpt/")

    p = sub.add_parser("sample", help="generate a sample mosaic, baseline or clockwork")
    _common(p)
    p.add_argument("--teacher")
    p.add_argument("--adaptor", default="none", help="'none', 'identity' or an adaptor checkpoint path")
    p.add_argument("--num-samples", type=int)

    p = sub.add_parser("perturb", help="feature-perturbation robustness sweep")
    _common(p)
    p.add_argument("--teacher")
    p.add_argument("--sites", type=lambda s: s.split(","))
    p.add_argument("--alphas", type=lambda s: [float(a) for a in s.split(",")])
    p.add_argument("--start-steps", type=lambda s: [int(a) for a in s.split(",")])
    p.add_argument("--num-seeds", type=int)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("profile", help="FLOP report, latency benchmark and edit-cost formulas")
    _common(p)
    p.add_argument("--adaptor-kind", choices=["identity", "resnet", "unet_light"])
    p.add_argument("--no-latency", action="store_true")
    p.add_argument("--pnp", nargs="+", metavar="KEY=VALUE",
                   help="edit cost only: N_I= C_I= N_G= C_G= F= FH= (GFLOPs)")

    p = sub.add_parser("compare", help="paired baseline / clockwork run with quality and cost")
    _common(p)
    p.add_argument("--teacher")
    p.add_argument("--adaptor", default="identity")
    p.add_argument("--num-samples", type=int)
    return parser


def resolve_config(args: argparse.Namespace):
    data = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {args.config}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    for dest, path in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            set_path(data, path, value)
    if getattr(args, "no_images", False):
        set_path(data, "dataset.enabled", False)
    if "seed" not in data:
        raise ConfigurationError("a seed is required (--seed or in --config)")
    return parse_config(data)


def _parse_pnp(items: list[str]) -> cost.PnpCostInput:
    keys = {"N_I": "n_inv", "C_I": "clock_inv", "N_G": "n_gen", "C_G": "clock_gen", "F": "f_full", "FH": "f_high"}
    values = {}
    for item in items:
        k, sep, v = item.partition("=")
        if not sep or k not in keys:
            raise ConfigurationError(f"bad --pnp item {item!r}; expected one of {sorted(keys)} as KEY=VALUE")
        try:
            values[keys[k]] = int(v) if keys[k].startswith(("n_", "clock")) else float(v)
        except ValueError:
            raise ConfigurationError(f"bad --pnp value {item!r}") from None
    missing = set(keys.values()) - set(values)
    if missing:
        raise ConfigurationError(f"--pnp is missing {sorted(missing)}")
    return cost.PnpCostInput(**values)


def _fmt(x: float) -> str:
    return f"{x:,.0f}" if float(x).is_integer() else f"{x:,.4f}"


def run_command(args: argparse.Namespace) -> dict:
    if args.command == "profile" and args.pnp:
        f_i, f_g, f = cost.pnp_flops(_parse_pnp(args.pnp))
        print(f"F_I = {_fmt(f_i)} GFLOPs")
        print(f"F_G = {_fmt(f_g)} GFLOPs")
        print(f"F = {_fmt(f)} GFLOPs")
        return {"F_I": f_i, "F_G": f_g, "F": f}

    cfg = resolve_config(args)
    run = runs.RunDir(Path(args.runs_dir), cfg.name)
    if args.command == "pretrain":
        return {"teacher": str(runs.pretrain(cfg, run))}
    if args.command == "distill":
        return {"adaptor": str(runs.distill(cfg, run, args.teacher, args.regular, args.workers, args.out))}
    if args.command == "sample":
        return runs.sample(cfg, run, args.teacher, args.adaptor)
    if args.command == "perturb":
        return {"csv": str(runs.perturb(cfg, run, args.teacher, args.workers))}
    if args.command == "profile":
        return runs.profile(cfg, run, latency=not args.no_latency)
    if args.command == "compare":
        return runs.compare(cfg, run, args.teacher, args.adaptor)
    raise ConfigurationError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        result = run_command(args)
    except (ConfigurationError, ProtocolError, ArchiveError, FileNotFoundError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_NUMERIC
    except ClockworkError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_CONFIG
    if not (args.command == "profile" and args.pnp):
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
