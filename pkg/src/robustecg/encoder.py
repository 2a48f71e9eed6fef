"""ECG and text encoders plus the projection and distillation heads."""

from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionMismatch, ShapeError
from .signalio import EcgRecord


@dataclass
class EncoderConfig:
    in_leads: int = 12
    stage_depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    stage_widths: list[int] = field(default_factory=lambda: [24, 48, 96, 192])
    stem_kernel: int = 4
    stem_stride: int = 4
    dw_kernel: int = 7
    expansion: int = 4
    embed_dim: int | None = None
    grn_eps: float = 1e-6

    def __post_init__(self):
        self.stage_depths = list(self.stage_depths)
        self.stage_widths = list(self.stage_widths)
        if len(self.stage_depths) != len(self.stage_widths) or not self.stage_depths:
            raise ConfigError("stage_depths and stage_widths must be non-empty and equal length")
        if min(self.stage_depths + self.stage_widths) < 1:
            raise ConfigError("depths and widths must be positive")
        if self.embed_dim is None:
            self.embed_dim = self.stage_widths[-1]

    @property
    def total_stride(self) -> int:
        return self.stem_stride * 2 ** (len(self.stage_widths) - 1)

    def min_samples(self) -> int:
        # circular padding needs at least dw_kernel // 2 tokens in the last stage
        return max(self.stem_kernel, self.total_stride * max(1, self.dw_kernel // 2))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeadConfig:
    proj_dim: int = 128
    dino_hidden: int = 512
    dino_bottleneck: int = 64
    dino_out: int = 1024
    text_buckets: int = 4096
    text_dim: int = 128

    def to_dict(self) -> dict:
        return asdict(self)


class GRN(nn.Module):
    """Global response normalization over the length axis (channels-last input)."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1, 1, dim))
        self.beta = nn.Parameter(torch.zeros(1, 1, dim))
        self.eps = eps

    def forward(self, x):
        gx = torch.sqrt(x.pow(2).sum(dim=1, keepdim=True) + self.eps)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + self.eps)
        return self.gamma * (x * nx) + self.beta + x


class ChannelsFirstLayerNorm(nn.LayerNorm):
    def forward(self, x):
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


class Block(nn.Module):
    def __init__(self, dim: int, dw_kernel: int = 7, expansion: int = 4, eps: float = 1e-6):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, dw_kernel, padding=dw_kernel // 2, groups=dim,
                                padding_mode="circular")
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, expansion * dim)
        self.grn = GRN(expansion * dim, eps)
        self.pwconv2 = nn.Linear(expansion * dim, dim)

    def forward(self, x):
        h = self.dwconv(x).transpose(1, 2)
        h = self.pwconv2(self.grn(F.gelu(self.pwconv1(self.norm(h)))))
        return x + h.transpose(1, 2)


class EcgEncoder(nn.Module):
    """1-D ConvNeXt V2: strided stem, stages of depthwise blocks, average pool."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = c = config or EncoderConfig()
        w = c.stage_widths
        self.stem = nn.Sequential(
            nn.Conv1d(c.in_leads, w[0], c.stem_kernel, stride=c.stem_stride),
            ChannelsFirstLayerNorm(w[0], eps=1e-6),
        )
        self.downsample = nn.ModuleList(
            nn.Sequential(ChannelsFirstLayerNorm(w[i - 1], eps=1e-6), nn.Conv1d(w[i - 1], w[i], 2, stride=2))
            for i in range(1, len(w))
        )
        self.stages = nn.ModuleList(
            nn.Sequential(*[Block(w[i], c.dw_kernel, c.expansion, c.grn_eps) for _ in range(d)])
            for i, d in enumerate(c.stage_depths)
        )
        self.norm = nn.LayerNorm(w[-1], eps=1e-6)
        self.out = nn.Identity() if c.embed_dim == w[-1] else nn.Linear(w[-1], c.embed_dim)
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Conv1d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.config.in_leads:
            raise ShapeError(f"expected (batch, {self.config.in_leads}, samples), got {tuple(x.shape)}")
        if x.shape[-1] < self.config.min_samples():
            raise ShapeError(f"{x.shape[-1]} samples is too short; need >= {self.config.min_samples()}")
        x = self.stages[0](self.stem(x))
        for down, stage in zip(self.downsample, self.stages[1:]):
            x = stage(down(x))
        return self.out(self.norm(x.mean(dim=-1)))


class HashedTextEncoder(nn.Module):
    """Trainable bag of hashed word uni- and bi-grams, mean-pooled.

    Stands in for a pretrained transformer text tower: the pooled output
    plays the role of the sequence-level token embedding.
    """

    def __init__(self, buckets: int = 4096, dim: int = 128, seed: int = 0):
        super().__init__()
        self.buckets = buckets
        self.embed_dim = dim
        self._key = seed.to_bytes(8, "little", signed=True)
        self.bag = nn.EmbeddingBag(buckets, dim, mode="mean")
        self.norm = nn.LayerNorm(dim)
        nn.init.normal_(self.bag.weight, std=1.0)

    def token_ids(self, text: str) -> list[int]:
        words = re.findall(r"[a-z0-9]+", text.lower())
        grams = ["<s>"] + words + [a + " " + b for a, b in zip(words, words[1:])]
        return [
            int.from_bytes(hashlib.blake2b(g.encode(), digest_size=8, key=self._key).digest(), "little")
            % self.buckets
            for g in grams
        ]

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        ids, offsets = [], []
        for t in texts:
            offsets.append(len(ids))
            ids.extend(self.token_ids(t))
        dev = self.bag.weight.device
        return self.norm(self.bag(torch.tensor(ids, device=dev), torch.tensor(offsets, device=dev)))


class PretrainedTextEncoder(nn.Module):
    """Adapter around a Hugging Face encoder; returns the first-token state."""

    def __init__(self, model_name: str = "michiyasunaga/BioLinkBERT-base", max_length: int = 256):
        super().__init__()
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModel.from_pretrained(model_name)
        self.max_length = max_length
        self.embed_dim = self.model.config.hidden_size

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        tok = self.tokenizer(list(texts), padding=True, truncation=True,
                             max_length=self.max_length, return_tensors="pt")
        tok = {k: v.to(next(self.model.parameters()).device) for k, v in tok.items()}
        return self.model(**tok).last_hidden_state[:, 0]


class ProjectionHead(nn.Module):
    """Bias-free linear map followed by L2 normalization.

    A zero projection maps to the first basis vector instead of 0/0.
    """

    def __init__(self, in_dim: int, proj_dim: int = 128, eps: float = 1e-12):
        super().__init__()
        self.in_dim = in_dim
        self.linear = nn.Linear(in_dim, proj_dim, bias=False)
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"projection expects dim {self.in_dim}, got {x.shape[-1]}")
        y = self.linear(x)
        n = y.norm(dim=-1, keepdim=True)
        basis = torch.zeros_like(y)
        basis[..., 0] = 1.0
        return torch.where(n > self.eps, y / n.clamp_min(self.eps), basis)


class DinoHead(nn.Module):
    """MLP to a normalized bottleneck, then a weight-normalized linear layer to the logits."""

    def __init__(self, in_dim: int, out_dim: int = 1024, hidden: int = 512, bottleneck: int = 64):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, bottleneck),
        )
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        last = nn.Linear(bottleneck, out_dim, bias=False)
        self.last_layer = nn.utils.parametrizations.weight_norm(last)
        with torch.no_grad():
            self.last_layer.parametrizations.weight.original0.fill_(1.0)
        self.last_layer.parametrizations.weight.original0.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"DINO head expects dim {self.in_dim}, got {x.shape[-1]}")
        z = F.normalize(self.mlp(x), dim=-1, eps=1e-12)
        return self.last_layer(z)


class Backbone(nn.Module):
    """The EMA-tracked unit: ECG encoder plus its distillation head."""

    def __init__(self, enc: EncoderConfig, heads: HeadConfig):
        super().__init__()
        self.encoder = EcgEncoder(enc)
        self.dino_head = DinoHead(self.encoder.embed_dim, heads.dino_out, heads.dino_hidden, heads.dino_bottleneck)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dino_head(self.encoder(x))


def as_batch(x) -> torch.Tensor:
    """Records, arrays or tensors to a float32 ``(batch, leads, samples)`` tensor."""
    if isinstance(x, EcgRecord):
        x = x.samples[None]
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], EcgRecord):
        x = np.stack([r.samples for r in x])
    if not isinstance(x, torch.Tensor):
        # records hold read-only arrays; torch wants writable memory
        x = np.array(x, dtype=np.float32)
    t = torch.as_tensor(x, dtype=torch.float32)
    return t[None] if t.dim() == 2 else t


def encode_ecg(encoder: EcgEncoder, records) -> torch.Tensor:
    """Pooled embeddings; a single record gives a 1-D vector."""
    single = isinstance(records, EcgRecord)
    out = encoder(as_batch(records))
    return out[0] if single else out


def encode_text(embedder: nn.Module, text: str | Sequence[str]) -> torch.Tensor:
    if isinstance(text, str):
        return embedder([text])[0]
    return embedder(list(text))


def project(head: ProjectionHead, embedding: torch.Tensor) -> torch.Tensor:
    return head(embedding)


def dino_forward(head: DinoHead, embedding: torch.Tensor) -> torch.Tensor:
    return head(embedding)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
