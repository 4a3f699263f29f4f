"""Four-stage encoder, projector, momentum twin, coarse head, fusion decoder and rescale adapters."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from . import substrate as ops


@dataclass(frozen=True)
class EncoderConfig:
    input_shape: tuple[int, int, int] = (3, 32, 32)
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    stage_strides: tuple[int, int, int, int] = (2, 2, 2, 2)
    embedding_dim: int = 64
    projector_dim: int = 128
    projector_hidden: int = 128
    decoder_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    coarse_count: int = 2
    ema_coeff: float = 0.999

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.stage_strides) != 4:
            raise ValueError("the encoder has exactly 4 stages")
        if len(self.decoder_channels) != 4:
            raise ValueError("decoder_channels needs one width per stage")
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ValueError(f"bad input_shape {self.input_shape}")

    @property
    def is_vector(self) -> bool:
        return self.input_shape[1] == 1 and self.input_shape[2] == 1

    def stage_sizes(self) -> list[tuple[int, int]]:
        """Spatial size after each stage (3x3 convs, padding 1)."""
        h, w = self.input_shape[1:]
        out = []
        for s in self.stage_strides:
            if not self.is_vector:
                h, w = (h - 1) // s + 1, (w - 1) // s + 1
            out.append((h, w))
        return out


# ---------------------------------------------------------------- layers


class Dense(nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator, gain: float = 2.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(d_out, d_in, generator=gen) * math.sqrt(gain / d_in))
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, x):
        return ops.dense(x, self.weight, self.bias)


class Conv(nn.Module):
    def __init__(self, c_in, c_out, gen, kernel=3, stride=1, padding=1):
        super().__init__()
        fan_in = c_in * kernel * kernel
        self.weight = nn.Parameter(
            torch.randn(c_out, c_in, kernel, kernel, generator=gen) * math.sqrt(2.0 / fan_in))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DeConv(nn.Module):
    def __init__(self, c_in, c_out, gen, kernel=(3, 3), stride=1, padding=0):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.weight = nn.Parameter(
            torch.randn(c_in, c_out, kh, kw, generator=gen) * math.sqrt(2.0 / c_in))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride, self.padding = stride, padding

    def forward(self, x, output_padding=0):
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding,
                                    output_padding)


# ---------------------------------------------------------------- blocks


@dataclass
class FeaturePack:
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor
    fq: torch.Tensor
    projected: torch.Tensor
    input_size: tuple[int, int] = (1, 1)

    @property
    def stages(self):
        return (self.f1, self.f2, self.f3, self.f4)


class Encoder(nn.Module):
    """Backbone ``E``: four stages and a pooled linear embedding head."""

    def __init__(self, cfg: EncoderConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        c_prev = cfg.input_shape[0]
        self.stages = nn.ModuleList()
        for c, s in zip(cfg.stage_channels, cfg.stage_strides):
            if cfg.is_vector:
                self.stages.append(Dense(c_prev, c, gen))
            else:
                self.stages.append(nn.ModuleList([Conv(c_prev, c, gen, stride=s), Conv(c, c, gen)]))
            c_prev = c
        self.head = Dense(c_prev, cfg.embedding_dim, gen, gain=1.0)

    def forward(self, x):
        feats = []
        if self.cfg.is_vector:
            h = x.flatten(1)
            for stage in self.stages:
                h = ops.relu(stage(h))
                feats.append(h)
            pooled = h
        else:
            h = x
            for down, conv in self.stages:
                h = ops.relu(conv(ops.relu(down(h))))
                feats.append(h)
            pooled = ops.global_avg_pool(h)
        return feats, self.head(pooled)


class Projector(nn.Module):
    """Three-layer MLP ``P``."""

    def __init__(self, d_in, hidden, d_out, gen):
        super().__init__()
        self.l1 = Dense(d_in, hidden, gen)
        self.l2 = Dense(hidden, hidden, gen)
        self.l3 = Dense(hidden, d_out, gen, gain=1.0)

    def forward(self, x):
        return self.l3(ops.relu(self.l2(ops.relu(self.l1(x)))))


class FusionDecoder(nn.Module):
    """Reconstructs the input from f1..f4 and fq, fusing deep to shallow."""

    def __init__(self, cfg: EncoderConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        sc, dc = cfg.stage_channels, cfg.decoder_channels
        c_in = cfg.input_shape[0]
        if cfg.is_vector:
            self.seed = None
            self.levels = nn.ModuleList([Dense(cfg.embedding_dim + sc[3], dc[3], gen)])
            for i in (2, 1, 0):
                self.levels.append(Dense(dc[i + 1] + sc[i], dc[i], gen))
            self.out = Dense(dc[0], c_in, gen, gain=1.0)
        else:
            h4, w4 = cfg.stage_sizes()[3]
            self.seed = Dense(cfg.embedding_dim, dc[3] * h4 * w4, gen)
            self.levels = nn.ModuleList([Conv(dc[3] + sc[3], dc[3], gen)])
            for i in (2, 1, 0):
                self.levels.append(Conv(dc[i + 1] + sc[i], dc[i], gen))
            s = cfg.stage_strides[0]
            self.out = DeConv(dc[0], c_in, gen, kernel=3, stride=s, padding=1)

    def forward(self, pack: FeaturePack):
        stages = pack.stages
        if self.cfg.is_vector:
            h = torch.cat([pack.fq, stages[3]], dim=1)
            h = ops.relu(self.levels[0](h))
            for lvl, i in zip(self.levels[1:], (2, 1, 0)):
                h = ops.relu(lvl(torch.cat([h, stages[i]], dim=1)))
            return self.out(h).reshape(-1, *self.cfg.input_shape)
        f4 = stages[3]
        z = ops.relu(self.seed(pack.fq)).reshape(f4.shape[0], -1, *f4.shape[2:])
        h = ops.relu(self.levels[0](ops.concat_channels([z, f4])))
        for lvl, i in zip(self.levels[1:], (2, 1, 0)):
            up = ops.upsample_nearest(h, stages[i].shape[2:])
            h = ops.relu(lvl(ops.concat_channels([up, stages[i]])))
        H, W = self.cfg.input_shape[1:]
        s = self.cfg.stage_strides[0]
        base_h = (h.shape[2] - 1) * s - 2 + 3
        base_w = (h.shape[3] - 1) * s - 2 + 3
        pad = (H - base_h, W - base_w)
        if not all(0 <= p < max(s, 1) for p in pad):
            raise ops.ShapeError("reconstruct", h.shape, self.cfg.input_shape, "decoder output size")
        return self.out(h, output_padding=pad)


class Identity(nn.Module):
    def forward(self, x):
        return x


class StageRescale(nn.Module):
    """Maps stage ``i`` onto the stage-4 grid with at most two (de)conv layers."""

    def __init__(self, cfg: EncoderConfig, stage: int, gen: torch.Generator):
        super().__init__()
        sc = cfg.stage_channels
        self.layers = nn.ModuleList()
        if cfg.is_vector:
            self.layers.append(Dense(sc[stage], sc[3], gen, gain=1.0))
            return
        strides = cfg.stage_strides[stage + 1:]
        if len(strides) > 2:
            raise ValueError("rescale adapters are limited to two layers")
        c = sc[stage]
        for s in strides:
            self.layers.append(Conv(c, sc[3], gen, stride=s))
            c = sc[3]

    def forward(self, x):
        for j, layer in enumerate(self.layers):
            if j:
                x = ops.relu(x)
            x = layer(x)
        return x


class EmbeddingRescale(nn.Module):
    """Maps fq (a d-vector) to the stage-4 shape with one transposed conv."""

    def __init__(self, cfg: EncoderConfig, gen: torch.Generator):
        super().__init__()
        self.vector = cfg.is_vector
        c4 = cfg.stage_channels[3]
        if self.vector:
            self.layer = Dense(cfg.embedding_dim, c4, gen, gain=1.0)
        else:
            self.layer = DeConv(cfg.embedding_dim, c4, gen, kernel=cfg.stage_sizes()[3])

    def forward(self, fq):
        if self.vector:
            return self.layer(fq)
        return self.layer(fq[:, :, None, None])


# ---------------------------------------------------------------- bundle


class ModelBundle(nn.Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.ema_coeff = cfg.ema_coeff
        gen = torch.Generator().manual_seed(int(seed))
        self.encoder = Encoder(cfg, gen)
        self.projector = Projector(cfg.embedding_dim, cfg.projector_hidden, cfg.projector_dim, gen)
        self.classifier = Dense(cfg.projector_dim, cfg.coarse_count, gen, gain=1.0)
        self.decoder = FusionDecoder(cfg, gen)
        self.rescale = nn.ModuleDict({
            "r2": StageRescale(cfg, 1, gen),
            "r3": StageRescale(cfg, 2, gen),
            "r4": Identity(),
            "rq": EmbeddingRescale(cfg, gen),
        })
        self.momentum_encoder = copy.deepcopy(self.encoder)
        self.momentum_projector = copy.deepcopy(self.projector)
        for p in self.momentum_parameters():
            p.requires_grad_(False)

    # parameters -------------------------------------------------------

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named_parameters() if not n.startswith("momentum_")}

    def momentum_parameters(self):
        return list(self.momentum_encoder.parameters()) + list(self.momentum_projector.parameters())

    def online_parameters(self):
        return list(self.encoder.parameters()) + list(self.projector.parameters())

    def parameter_counts(self) -> dict[str, int]:
        groups = {
            "encoder": self.encoder, "projector": self.projector, "classifier": self.classifier,
            "decoder": self.decoder, "rescale": self.rescale,
            "momentum_encoder": self.momentum_encoder, "momentum_projector": self.momentum_projector,
        }
        counts = {k: sum(p.numel() for p in m.parameters()) for k, m in groups.items()}
        counts["total"] = sum(counts.values())
        return counts

    def momentum_update(self) -> None:
        ops.ema_update(self.momentum_parameters(), self.online_parameters(), self.ema_coeff)

    # forward ----------------------------------------------------------

    def _check_input(self, x):
        if tuple(x.shape[1:]) != tuple(self.cfg.input_shape):
            raise ops.ShapeError("encode", x.shape, ("B",) + tuple(self.cfg.input_shape))

    def encode(self, x: torch.Tensor) -> FeaturePack:
        self._check_input(x)
        (f1, f2, f3, f4), fq = self.encoder(x)
        return FeaturePack(f1, f2, f3, f4, fq, self.projector(fq), tuple(x.shape[2:]))

    def coarse_logits(self, pack: FeaturePack) -> torch.Tensor:
        return self.classifier(pack.projected)

    @torch.no_grad()
    def keys(self, x: torch.Tensor) -> torch.Tensor:
        """Gradient-isolated projected keys from the momentum twin."""
        self._check_input(x)
        _, fq = self.momentum_encoder(x)
        return self.momentum_projector(fq)

    def reconstruct(self, pack: FeaturePack) -> torch.Tensor:
        return self.decoder(pack)

    def rescale_all(self, pack: FeaturePack, detach_stages: bool = False):
        """(R2(f2), R3(f3), R4(f4), Rq(fq)), all shaped like f4."""
        f2, f3, f4 = pack.f2, pack.f3, pack.f4
        if detach_stages:
            f2, f3, f4 = f2.detach(), f3.detach(), f4.detach()
        out = (self.rescale["r2"](f2), self.rescale["r3"](f3), self.rescale["r4"](f4),
               self.rescale["rq"](pack.fq))
        for t in out[1:]:
            if t.shape != out[0].shape:
                raise ops.ShapeError("rescale_all", out[0].shape, t.shape)
        return out

    @torch.no_grad()
    def embed(self, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
        """Backbone-only embeddings fq (no projector)."""
        chunks = []
        for i in range(0, len(x), batch_size):
            xb = x[i:i + batch_size]
            self._check_input(xb)
            chunks.append(self.encoder(xb)[1])
        return torch.cat(chunks) if chunks else torch.zeros(0, self.cfg.embedding_dim)

    @torch.no_grad()
    def stage_features(self, x: torch.Tensor, batch_size: int = 512) -> list[torch.Tensor]:
        """Globally pooled f1..f4 plus fq, one (M, C) tensor each."""
        out = [[] for _ in range(5)]
        for i in range(0, len(x), batch_size):
            pack = self.encode(x[i:i + batch_size])
            for j, f in enumerate(pack.stages):
                out[j].append(f if f.dim() == 2 else ops.global_avg_pool(f))
            out[4].append(pack.fq)
        return [torch.cat(o) for o in out]

    # persistence ------------------------------------------------------

    def tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items()}

    def load_tensors(self, tensors: dict[str, torch.Tensor], strict: bool = True) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in tensors]
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        with torch.no_grad():
            for k, v in own.items():
                if k in tensors:
                    src = tensors[k]
                    if src.shape != v.shape:
                        raise ops.ShapeError("load", v.shape, src.shape, k)
                    v.copy_(src.to(v.dtype))


def build_model(cfg: EncoderConfig, seed: int = 0, dtype: Optional[torch.dtype] = None) -> ModelBundle:
    model = ModelBundle(cfg, seed)
    if dtype is not None:
        model = model.to(dtype)
    return model
