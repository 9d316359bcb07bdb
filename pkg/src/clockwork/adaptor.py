"""Lightweight stand-ins for the low-res core: identity, ResNet and UNet-light adaptors.

All variants map ``(r_in, r_out_prev, t_emb, c_emb)`` to a tensor shaped like
``r_in``.  Learned variants concatenate the enabled feature inputs on the
channel axis and add their output to ``r_out_prev``; the last layer is zero
initialised, so a fresh learned adaptor reproduces the identity adaptor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigurationError, ProtocolError
from .layers import Conv2d, ConvTranspose2d, Linear, ResBlock

KINDS = ("identity", "resnet", "unet_light")
INPUTS = ("r_in", "r_out_prev", "t_emb", "c_emb")


@dataclass(frozen=True)
class AdaptorSpec:
    kind: str = "resnet"
    channels: int = 64  # internal width (C for unet_light)
    feature_channels: int = 32  # channels of r_in / r_out
    emb_dim: int = 128
    inputs: tuple[str, ...] = INPUTS
    blocks: int = 2  # middle ResBlocks of unet_light
    groups: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", tuple(i for i in INPUTS if i in set(self.inputs)))
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown adaptor kind {self.kind!r}")
        if self.kind == "identity":
            if "r_out_prev" not in self.inputs:
                raise ConfigurationError("identity adaptor needs r_out_prev")
            return
        if not {"r_in", "r_out_prev"} & set(self.inputs):
            raise ConfigurationError("learned adaptor needs r_in and/or r_out_prev")
        if self.channels % self.groups:
            raise ConfigurationError(f"adaptor width {self.channels} not divisible by {self.groups} groups")
        if self.blocks < 1:
            raise ConfigurationError("unet_light needs at least one middle block")

    @property
    def uses_previous(self) -> bool:
        return "r_out_prev" in self.inputs

    def to_dict(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "feature_channels": self.feature_channels,
                "emb_dim": self.emb_dim, "inputs": list(self.inputs), "blocks": self.blocks, "groups": self.groups}

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptorSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown adaptor keys: {sorted(unknown)}")
        d = dict(d)
        if "inputs" in d:
            d["inputs"] = tuple(d["inputs"])
        return cls(**d)


class Adaptor(nn.Module):
    def __init__(self, spec: AdaptorSpec, gen: torch.Generator):
        super().__init__()
        self.spec = spec
        if spec.kind == "identity":
            return
        n_feat = sum(i in spec.inputs for i in ("r_in", "r_out_prev"))
        c_in = n_feat * spec.feature_channels
        width = spec.channels
        emb = spec.emb_dim
        self.cond_proj = Linear(emb, width, gen) if "c_emb" in spec.inputs else None
        if spec.kind == "resnet":
            self.down = Conv2d(c_in, width, 3, gen, stride=2, padding=1)
            self.res = nn.ModuleList([ResBlock(width, width, emb, spec.groups, gen) for _ in range(2)])
            self.up = ConvTranspose2d(width, spec.feature_channels, gen, zero_init=True)
        else:
            self.conv_in = Conv2d(c_in, width, 3, gen)
            self.down = nn.ModuleList([Conv2d(width, width, 3, gen, stride=2, padding=1) for _ in range(2)])
            self.res = nn.ModuleList([ResBlock(width, width, emb, spec.groups, gen) for _ in range(spec.blocks)])
            self.up = nn.ModuleList([ConvTranspose2d(width, width, gen) for _ in range(2)])
            self.conv_out = Conv2d(width, spec.feature_channels, 3, gen, zero_init=True)

    def forward(self, r_in: torch.Tensor, r_out_prev: torch.Tensor | None,
                t_emb: torch.Tensor, c_emb: torch.Tensor | None) -> torch.Tensor:
        return adaptor_forward(self, r_in, r_out_prev, t_emb, c_emb)


def build_adaptor(spec: AdaptorSpec, seed: int) -> Adaptor:
    return Adaptor(spec, torch.Generator().manual_seed(seed))


def adaptor_forward(a: Adaptor, r_in: torch.Tensor, r_out_prev: torch.Tensor | None,
                    t_emb: torch.Tensor, c_emb: torch.Tensor | None) -> torch.Tensor:
    spec = a.spec
    if spec.uses_previous:
        if r_out_prev is None:
            raise ProtocolError("adaptor invoked without a cached r_out from the previous step")
        if r_out_prev.shape != r_in.shape:
            raise ConfigurationError(f"r_out_prev {tuple(r_out_prev.shape)} and r_in {tuple(r_in.shape)} differ")
    if r_in.dim() != 4 or r_in.shape[1] != spec.feature_channels:
        raise ConfigurationError(f"adaptor expects {spec.feature_channels} feature channels, got {tuple(r_in.shape)}")
    if spec.kind == "identity":
        return r_out_prev

    with nx.op_scope("adaptor"):
        feats = []
        if "r_in" in spec.inputs:
            feats.append(r_in)
        if spec.uses_previous:
            feats.append(r_out_prev)
        h = feats[0] if len(feats) == 1 else torch.cat(feats, dim=1)
        emb = t_emb if "t_emb" in spec.inputs else torch.zeros_like(t_emb)
        if spec.kind == "resnet":
            h = a.down(h)
            if a.cond_proj is not None and c_emb is not None:
                h = h + a.cond_proj(c_emb)[:, :, None, None]
            for block in a.res:
                h = block(h, emb)
            out = a.up(h)
        else:
            h0 = a.conv_in(h)
            if a.cond_proj is not None and c_emb is not None:
                h0 = h0 + a.cond_proj(c_emb)[:, :, None, None]
            h1 = a.down[0](h0)
            h = a.down[1](h1)
            for block in a.res:
                h = block(h, emb)
            h = a.up[0](h) + h1
            h = a.up[1](h) + h0
            out = a.conv_out(nx.silu(h))
    if out.shape != r_in.shape:
        raise ConfigurationError(f"adaptor output {tuple(out.shape)} differs from r_in {tuple(r_in.shape)}")
    return out + r_out_prev if spec.uses_previous else out
