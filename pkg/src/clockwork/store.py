"""Tensor archives (checkpoints, trajectory sets) and PPM image mosaics.

Archive layout, all integers little-endian::

    b"CWKT" | u32 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype (0 = f32) | u8 rank | u32 dims[rank] | payload )
    config blob: UTF-8 JSON up to end of file
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from .errors import ArchiveError, ConfigurationError

MAGIC = b"CWKT"
VERSION = 1
DTYPE_F32 = 0


def write_archive(path: str | Path, tensors: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
                  config: dict) -> None:
    """``tensors`` is a mapping or a sequence of (name, tensor) pairs; names must be unique."""
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    seen: set[str] = set()
    for name, _ in items:
        if name in seen:
            raise ArchiveError(f"duplicate entry name {name!r}")
        seen.add(name)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, t in items:
        raw = name.encode("utf-8")
        if len(raw) >= 1 << 16:
            raise ArchiveError(f"entry name too long: {name[:40]}...")
        arr = t.detach().cpu().contiguous()
        if arr.dtype != torch.float32:
            raise ArchiveError(f"entry {name!r} has dtype {arr.dtype}; only float32 is stored")
        if not torch.isfinite(arr).all():
            raise ArchiveError(f"entry {name!r} contains non-finite values")
        if arr.dim() > 255:
            raise ArchiveError(f"entry {name!r} has rank {arr.dim()}")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", DTYPE_F32, arr.dim()))
        chunks.append(struct.pack(f"<{arr.dim()}I", *arr.shape))
        chunks.append(arr.numpy().astype("<f4", copy=False).tobytes())
    chunks.append(json.dumps(config, sort_keys=True).encode("utf-8"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_archive(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ArchiveError(f"{path}: truncated while reading {what}")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise ArchiveError(f"{path}: not a CWKT archive")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ArchiveError(f"{path}: archive version {version}, this reader understands {VERSION}")
    tensors: dict[str, torch.Tensor] = {}
    for k in range(count):
        (n,) = struct.unpack("<H", take(2, f"entry {k} name length"))
        try:
            name = take(n, f"entry {k} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise ArchiveError(f"{path}: entry {k} name is not UTF-8") from e
        dtype, rank = struct.unpack("<BB", take(2, f"entry {name!r} header"))
        if dtype != DTYPE_F32:
            raise ArchiveError(f"{path}: entry {name!r} has unknown dtype code {dtype}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"entry {name!r} dims"))
        count_el = int(np.prod(dims)) if rank else 1
        payload = take(4 * count_el, f"entry {name!r} payload")
        if name in tensors:
            raise ArchiveError(f"{path}: duplicate entry {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
    try:
        config = json.loads(data[pos:].decode("utf-8")) if pos < len(data) else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArchiveError(f"{path}: config blob is not valid JSON") from e
    return tensors, config


# ---------------------------------------------------------------------------
# models, adaptors, trajectories


def save_checkpoint(obj, path: str | Path, provenance: dict | None = None) -> None:
    """Store a SplitUNet, an Adaptor or a list of Trajectory objects."""
    from .adaptor import Adaptor
    from .unet import SplitUNet

    provenance = dict(provenance or {})
    if isinstance(obj, SplitUNet):
        tensors = {f"unet.{k}": v for k, v in obj.state_dict().items()}
        config = {"kind": "unet", "unet": obj.config.to_dict(), "provenance": provenance}
    elif isinstance(obj, Adaptor):
        tensors = {f"adaptor.{k}": v for k, v in obj.state_dict().items()}
        config = {"kind": "adaptor", "adaptor": obj.spec.to_dict(), "provenance": provenance}
    elif isinstance(obj, (list, tuple)):
        tensors, meta = _pack_trajectories(obj)
        config = {"kind": "trajectories", "trajectories": meta, "provenance": provenance}
    else:
        raise ConfigurationError(f"cannot checkpoint {type(obj).__name__}")
    write_archive(path, tensors, config)


def load_checkpoint(path: str | Path):
    """Inverse of :func:`save_checkpoint`; returns (object, provenance)."""
    from .adaptor import Adaptor, AdaptorSpec
    from .unet import SplitUNet, UNetConfig

    tensors, config = read_archive(path)
    kind = config.get("kind")
    provenance = config.get("provenance", {})
    if kind == "unet":
        model = SplitUNet(UNetConfig.from_dict(config["unet"]), torch.Generator().manual_seed(0))
        _load_state(model, tensors, "unet.", path)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return model, provenance
    if kind == "adaptor":
        adaptor = Adaptor(AdaptorSpec.from_dict(config["adaptor"]), torch.Generator().manual_seed(0))
        _load_state(adaptor, tensors, "adaptor.", path)
        adaptor.eval()
        for p in adaptor.parameters():
            p.requires_grad_(False)
        return adaptor, provenance
    if kind == "trajectories":
        return _unpack_trajectories(tensors, config["trajectories"]), provenance
    raise ArchiveError(f"{path}: unknown archive kind {kind!r}")


def _load_state(module: torch.nn.Module, tensors: dict, prefix: str, path) -> None:
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    expected = module.state_dict()
    missing = set(expected) - set(state)
    extra = set(state) - set(expected)
    if missing or extra:
        raise ArchiveError(f"{path}: missing entries {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for k, v in state.items():
        if v.shape != expected[k].shape:
            raise ArchiveError(f"{path}: entry {prefix}{k} has shape {tuple(v.shape)}, expected {tuple(expected[k].shape)}")
    module.load_state_dict(state)


def _pack_trajectories(trajs) -> tuple[dict[str, torch.Tensor], list[dict]]:
    tensors: dict[str, torch.Tensor] = {}
    meta = []
    for j, traj in enumerate(trajs):
        entry = {"seed": traj.seed, "steps": [], "labels": None, "model_labels": None}
        if traj.condition is not None:
            entry["labels"] = [int(v) for v in torch.as_tensor(traj.condition)]
        if traj.model_labels is not None:
            entry["model_labels"] = [int(v) for v in torch.as_tensor(traj.model_labels)]
        for rec in traj.records:
            entry["steps"].append({"step": rec.step, "t": rec.t, "approximated": rec.approximated,
                                   "has_r": rec.r_in is not None})
            tensors[f"traj.{j}.{rec.step}.x_t"] = rec.x_t.float()
            if rec.r_in is not None:
                tensors[f"traj.{j}.{rec.step}.r_in"] = rec.r_in.float()
                tensors[f"traj.{j}.{rec.step}.r_out"] = rec.r_out.float()
        meta.append(entry)
    return tensors, meta


def _unpack_trajectories(tensors, meta):
    from .sampler import StepRecord, Trajectory

    out = []
    for j, entry in enumerate(meta):
        labels = None if entry["labels"] is None else torch.tensor(entry["labels"])
        model_labels = None if entry["model_labels"] is None else torch.tensor(entry["model_labels"])
        traj = Trajectory(labels, entry["seed"], model_labels=model_labels)
        for s in entry["steps"]:
            key = f"traj.{j}.{s['step']}"
            r_in = tensors[f"{key}.r_in"] if s["has_r"] else None
            r_out = tensors[f"{key}.r_out"] if s["has_r"] else None
            traj.records.append(StepRecord(s["step"], s["t"], tensors[f"{key}.x_t"], r_in, r_out, s["approximated"]))
        out.append(traj)
    return out


# ---------------------------------------------------------------------------
# images


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """[0, 1] floats (N, 3, H, W) to u8, clamping first."""
    return (images.detach().double().clamp(0, 1) * 255).round().to(torch.uint8).numpy()


def write_ppm(images: torch.Tensor, path: str | Path, nrow: int | None = None) -> None:
    """Binary P6 mosaic of (N, 3, H, W) images with values in [0, 1], ``nrow`` images per row."""
    if images.dim() != 4 or images.shape[1] != 3:
        raise ConfigurationError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
    n, _, h, w = images.shape
    nrow = nrow or max(1, int(np.ceil(np.sqrt(n))))
    rows = (n + nrow - 1) // nrow
    u8 = to_uint8(images)
    canvas = np.zeros((rows * h, nrow * w, 3), dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, nrow)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = u8[k].transpose(1, 2, 0)
    header = f"P6\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + canvas.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Parse a P6 file written by :func:`write_ppm`; returns (H, W, 3) uint8."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ArchiveError(f"{path}: not a P6 file")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise ArchiveError(f"{path}: unsupported max value {parts[2]!r}")
    body = parts[3]
    if len(body) != w * h * 3:
        raise ArchiveError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
