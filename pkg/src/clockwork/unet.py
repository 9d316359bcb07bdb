"""Class-conditional UNet split into a high-res input path, a low-res core and a high-res output path.

Layout for ``channels = (c0, c1, ..., c_{S-1})``:

* encoder: ``conv_in``, then per stage two ResBlocks (+ attention) and, except
  at the last stage, a stride-2 conv.  Every block output is pushed as a skip.
* middle: ResBlock, optional attention, ResBlock at the lowest resolution.
* decoder: per stage three ResBlocks, each consuming one skip; the last block of
  stage ``s >= 1`` maps back to ``c_{s-1}`` channels and is followed by a
  stride-2 transposed conv.

Splitting at ``cutoff_stage = k``: the high-res input path runs ``conv_in`` and
encoder stages ``< k`` (including the last downsample, whose output is
``r_in``); the low-res core runs everything at stage ``>= k`` and returns the
decoder-stage-``k`` output ``r_out``, which has the same shape as ``r_in``;
the high-res output path upsamples ``r_out`` and finishes decoding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import torch
from torch import nn

from . import numerics as nx
from .errors import ConfigurationError
from .layers import AttentionBlock, Conv2d, ConvTranspose2d, GroupNorm, Linear, ResBlock, sinusoidal_embedding

FeatureHook = Callable[[str, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 32
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    cutoff_stage: int = 1
    attention_at: tuple[int, ...] | None = None  # None: lowest stage only
    efficient: bool = False
    num_classes: int = 16  # 0 disables conditioning
    time_embed_dim: int = 64
    groups: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.attention_at is not None:
            object.__setattr__(self, "attention_at", tuple(sorted(self.attention_at)))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    @property
    def emb_dim(self) -> int:
        return 4 * self.channels[0]

    @property
    def attention_stages(self) -> frozenset[int]:
        stages = {self.num_stages - 1} if self.attention_at is None else set(self.attention_at)
        if self.efficient:
            stages.discard(0)
        return frozenset(stages)

    @property
    def null_class(self) -> int:
        return self.num_classes

    def stage_size(self, stage: int) -> int:
        return self.image_size // 2 ** stage

    def validate(self) -> None:
        s = self.num_stages
        if s < 2:
            raise ConfigurationError("UNet needs at least two stages")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigurationError(f"channel list must be strictly increasing: {self.channels}")
        if not 1 <= self.cutoff_stage <= s - 1:
            raise ConfigurationError(f"cutoff_stage must lie in 1..{s - 1}, got {self.cutoff_stage}")
        if self.image_size % 2 ** (s - 1):
            raise ConfigurationError(f"image size {self.image_size} not divisible by 2^{s - 1}")
        if any(c % self.groups for c in self.channels):
            raise ConfigurationError(f"channels {self.channels} not divisible by {self.groups} groups")
        if self.attention_at is not None and any(not 0 <= a < s for a in self.attention_at):
            raise ConfigurationError(f"attention stage out of range: {self.attention_at}")
        if self.num_classes < 0 or self.time_embed_dim % 2:
            raise ConfigurationError("num_classes must be >= 0 and time_embed_dim even")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["attention_at"] = None if self.attention_at is None else list(self.attention_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown unet config keys: {sorted(unknown)}")
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        if d.get("attention_at") is not None:
            d["attention_at"] = tuple(d["attention_at"])
        return cls(**d)


class HighInOutput(NamedTuple):
    r_in: torch.Tensor
    skips: list[torch.Tensor]


class UNetOutput(NamedTuple):
    eps: torch.Tensor
    r_in: torch.Tensor
    r_out: torch.Tensor


def _hook(hook: FeatureHook | None, site: str, x: torch.Tensor) -> torch.Tensor:
    return x if hook is None else hook(site, x)


class _EncoderStage(nn.Module):
    def __init__(self, c_in: int, c: int, emb: int, groups: int, attn: bool, down: bool, gen: torch.Generator):
        super().__init__()
        self.res = nn.ModuleList([ResBlock(c_in, c, emb, groups, gen), ResBlock(c, c, emb, groups, gen)])
        self.attn = nn.ModuleList([AttentionBlock(c, groups, gen) for _ in range(2)]) if attn else None
        self.downsample = Conv2d(c, c, 3, gen, stride=2, padding=1) if down else None


class _DecoderStage(nn.Module):
    def __init__(self, c_h: int, c: int, c_skip_last: int, c_out: int, emb: int, groups: int,
                 attn: bool, up: bool, gen: torch.Generator):
        super().__init__()
        self.res = nn.ModuleList([
            ResBlock(c_h + c, c, emb, groups, gen),
            ResBlock(c + c, c, emb, groups, gen),
            ResBlock(c + c_skip_last, c_out, emb, groups, gen),
        ])
        outs = (c, c, c_out)
        self.attn = nn.ModuleList([AttentionBlock(o, groups, gen) for o in outs]) if attn else None
        self.upsample = ConvTranspose2d(c_out, c_out, gen) if up else None


class SplitUNet(nn.Module):
    def __init__(self, config: UNetConfig, gen: torch.Generator):
        super().__init__()
        self.config = config
        cfg = config
        ch = cfg.channels
        emb = cfg.emb_dim
        g = cfg.groups
        attn = cfg.attention_stages
        s_count = cfg.num_stages

        self.time_mlp = nn.ModuleList([Linear(cfg.time_embed_dim, emb, gen), Linear(emb, emb, gen)])
        if cfg.num_classes:
            self.class_embedding = nn.Parameter(torch.randn(cfg.num_classes + 1, emb, generator=gen))
        else:
            self.class_embedding = None

        self.conv_in = Conv2d(cfg.in_channels, ch[0], 3, gen)
        self.down = nn.ModuleList()
        for s in range(s_count):
            c_in = ch[s - 1] if s else ch[0]
            self.down.append(_EncoderStage(c_in, ch[s], emb, g, s in attn, s < s_count - 1, gen))

        low = ch[-1]
        self.mid = nn.ModuleList([ResBlock(low, low, emb, g, gen), ResBlock(low, low, emb, g, gen)])
        self.mid_attn = AttentionBlock(low, g, gen) if (s_count - 1) in attn else None

        up = [None] * s_count
        for s in reversed(range(s_count)):
            c_skip_last = ch[s - 1] if s else ch[0]
            c_out = ch[s - 1] if s else ch[0]
            up[s] = _DecoderStage(ch[s], ch[s], c_skip_last, c_out, emb, g, s in attn, s > 0, gen)
        self.up = nn.ModuleList(up)

        self.out_norm = GroupNorm(ch[0], g)
        self.out_conv = Conv2d(ch[0], cfg.in_channels, 3, gen, zero_init=True)

    # -- embeddings ---------------------------------------------------------

    def embed(self, t: torch.Tensor | int, labels: torch.Tensor | None, batch: int,
              dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Time embedding (N, E) and class embedding (N, E) or None."""
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(batch)
        with nx.op_scope("embed"):
            h = sinusoidal_embedding(t, self.config.time_embed_dim, dtype)
            h = self.time_mlp[1](nx.silu(self.time_mlp[0](h)))
        c_emb = None
        if self.class_embedding is not None:
            if labels is None:
                labels = torch.full((batch,), self.config.null_class, dtype=torch.long)
            labels = torch.as_tensor(labels, dtype=torch.long)
            if labels.shape != (batch,):
                raise ConfigurationError(f"labels shape {tuple(labels.shape)} != ({batch},)")
            if bool(((labels < 0) | (labels > self.config.num_classes)).any()):
                raise ConfigurationError("class label out of range")
            c_emb = self.class_embedding[labels]
        return h, c_emb

    @staticmethod
    def _cond(t_emb: torch.Tensor, c_emb: torch.Tensor | None) -> torch.Tensor:
        return t_emb if c_emb is None else t_emb + c_emb

    # -- stage helpers ------------------------------------------------------

    def _encoder_stage(self, s: int, h: torch.Tensor, emb: torch.Tensor, skips: list[torch.Tensor],
                       hook: FeatureHook | None) -> torch.Tensor:
        stage = self.down[s]
        with nx.op_scope(f"stage{s}"):
            for j, block in enumerate(stage.res):
                h = block(h, emb)
                if stage.attn is not None:
                    h = stage.attn[j](h)
                skips.append(h)
            if stage.downsample is not None:
                h = stage.downsample(h)
                skips.append(h)
        h = _hook(hook, f"down{s}", h)
        return h

    def _decoder_blocks(self, s: int, h: torch.Tensor, emb: torch.Tensor, skips: list[torch.Tensor],
                        hook: FeatureHook | None) -> torch.Tensor:
        stage = self.up[s]
        with nx.op_scope(f"stage{s}"):
            for j, block in enumerate(stage.res):
                h = block(torch.cat([h, skips.pop()], dim=1), emb)
                if stage.attn is not None:
                    h = stage.attn[j](h)
        return _hook(hook, f"up{s}", h)

    def _upsample(self, s: int, h: torch.Tensor) -> torch.Tensor:
        with nx.op_scope(f"stage{s - 1}"):
            return self.up[s].upsample(h)

    def _check_input(self, x: torch.Tensor) -> None:
        cfg = self.config
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ConfigurationError(f"input shape {tuple(x.shape)} does not match (N, {expected})")

    # -- split pipeline -----------------------------------------------------

    def encode_high(self, x: torch.Tensor, t_emb: torch.Tensor, c_emb: torch.Tensor | None,
                    hook: FeatureHook | None = None) -> HighInOutput:
        self._check_input(x)
        emb = self._cond(t_emb, c_emb)
        with nx.op_scope("high_in"):
            with nx.op_scope("stage0"):
                h = self.conv_in(x)
            skips = [h]
            for s in range(self.config.cutoff_stage):
                h = self._encoder_stage(s, h, emb, skips, hook)
        r_in = skips.pop()
        skips = [_hook(hook, f"skip{j}", sk) for j, sk in enumerate(skips)]
        return HighInOutput(_hook(hook, "r_in", r_in), skips)

    def run_low(self, r_in: torch.Tensor, t_emb: torch.Tensor, c_emb: torch.Tensor | None,
                hook: FeatureHook | None = None) -> torch.Tensor:
        cfg = self.config
        k = cfg.cutoff_stage
        expected = (cfg.channels[k - 1], cfg.stage_size(k), cfg.stage_size(k))
        if r_in.dim() != 4 or tuple(r_in.shape[1:]) != expected:
            raise ConfigurationError(f"r_in shape {tuple(r_in.shape)} does not match (N, {expected})")
        emb = self._cond(t_emb, c_emb)
        with nx.op_scope("low"):
            skips = [r_in]
            h = r_in
            for s in range(k, cfg.num_stages):
                h = self._encoder_stage(s, h, emb, skips, hook)
            h = self._middle(h, emb, hook)
            for s in reversed(range(k, cfg.num_stages)):
                if s < cfg.num_stages - 1:
                    h = self._upsample(s + 1, h)
                h = self._decoder_blocks(s, h, emb, skips, hook)
        return _hook(hook, "r_out", h)

    def decode_high(self, r_out: torch.Tensor, skips: list[torch.Tensor], t_emb: torch.Tensor,
                    c_emb: torch.Tensor | None, hook: FeatureHook | None = None) -> torch.Tensor:
        k = self.config.cutoff_stage
        if len(skips) != 3 * k:
            raise ConfigurationError(f"decode_high expects {3 * k} skips, got {len(skips)}")
        emb = self._cond(t_emb, c_emb)
        skips = list(skips)
        with nx.op_scope("high_out"):
            h = r_out
            for s in reversed(range(k)):
                h = self._upsample(s + 1, h)
                h = self._decoder_blocks(s, h, emb, skips, hook)
            with nx.op_scope("stage0"):
                h = self.out_conv(nx.silu(self.out_norm(h)))
        return h

    def _middle(self, h: torch.Tensor, emb: torch.Tensor, hook: FeatureHook | None) -> torch.Tensor:
        with nx.op_scope(f"stage{self.config.num_stages - 1}"):
            h = self.mid[0](h, emb)
            if self.mid_attn is not None:
                h = self.mid_attn(h)
            h = self.mid[1](h, emb)
        return _hook(hook, "mid", h)

    def predict_noise(self, x: torch.Tensor, t: torch.Tensor | int, labels: torch.Tensor | None = None,
                      hook: FeatureHook | None = None) -> UNetOutput:
        """Noise prediction through the three split stages; exposes (r_in, r_out)."""
        t_emb, c_emb = self.embed(t, labels, x.shape[0], x.dtype)
        r_in, skips = self.encode_high(x, t_emb, c_emb, hook)
        r_out = self.run_low(r_in, t_emb, c_emb, hook)
        eps = self.decode_high(r_out, skips, t_emb, c_emb, hook)
        return UNetOutput(eps, r_in, r_out)

    def forward_full(self, x: torch.Tensor, t: torch.Tensor | int, labels: torch.Tensor | None = None) -> torch.Tensor:
        """Monolithic encoder/middle/decoder pass; the reference the split must match."""
        self._check_input(x)
        t_emb, c_emb = self.embed(t, labels, x.shape[0], x.dtype)
        emb = self._cond(t_emb, c_emb)
        s_count = self.config.num_stages
        h = self.conv_in(x)
        skips = [h]
        for s in range(s_count):
            h = self._encoder_stage(s, h, emb, skips, None)
        h = self._middle(h, emb, None)
        for s in reversed(range(s_count)):
            if s < s_count - 1:
                h = self._upsample(s + 1, h)
            h = self._decoder_blocks(s, h, emb, skips, None)
        return self.out_conv(nx.silu(self.out_norm(h)))

    def forward(self, x: torch.Tensor, t: torch.Tensor | int, labels: torch.Tensor | None = None) -> torch.Tensor:
        return self.predict_noise(x, t, labels).eps


def build_unet(config: UNetConfig, seed: int) -> SplitUNet:
    gen = torch.Generator().manual_seed(seed)
    return SplitUNet(config, gen)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
