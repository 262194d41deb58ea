"""Toy-scale transformer: patch-embedding encoder and a query-based decoder.

The decoder holds one learnable query per class; each refined query passes
through a shared scalar head, so logit j is tied to query j. Classification
probabilities and the per-class confidence response are both computed from
this single logits vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigurationError, NumericError, ValidationError


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.depth < 1:
            raise ConfigurationError("encoder depth must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
        }


@dataclass(frozen=True)
class DecoderConfig:
    num_classes: int = 7
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.depth < 1:
            raise ConfigurationError("decoder depth must be >= 1")

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "depth": self.depth, "heads": self.heads}


class Attention(nn.Module):
    """Multi-head attention; self-attention when context is None."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        ctx = x if context is None else context
        b, n, d = x.shape
        m = ctx.shape[1]
        q = self.to_q(x).view(b, n, self.heads, -1).transpose(1, 2)
        k = self.to_k(ctx).view(b, m, self.heads, -1).transpose(1, 2)
        v = self.to_v(ctx).view(b, m, self.heads, -1).transpose(1, 2)
        attn = (q @ k.transpose(-1, -2)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + MLP block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """Pre-norm query self-attention, cross-attention over tokens, then MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio)

    def forward(self, q: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        q = q + self.self_attn(self.norm1(q))
        q = q + self.cross_attn(self.norm2(q), context=tokens)
        return q + self.mlp(self.norm3(q))


class Encoder(nn.Module):
    """Patchify, embed, add learnable positions, run pre-norm blocks."""

    def __init__(self, config: EncoderConfig, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config
        p = config.patch_size
        self.patch_embed = nn.Linear(p * p, config.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches, config.embed_dim))
        self.mask_token = nn.Parameter(torch.zeros(config.embed_dim))
        self.blocks = nn.ModuleList(
            EncoderBlock(config.embed_dim, config.heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.embed_dim)
        nn.init.normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)
        self.to(dtype)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W) -> (B, N, patch_size**2) in row-major patch order."""
        if images.ndim == 2:
            images = images.unsqueeze(0)
        b, h, w = images.shape
        s, p = self.config.image_size, self.config.patch_size
        if (h, w) != (s, s):
            raise ValidationError(f"expected {s}x{s} images, got {h}x{w}")
        g = s // p
        return images.view(b, g, p, g, p).permute(0, 1, 3, 2, 4).reshape(b, g * g, p * p)

    def forward(self, images: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Visual tokens of shape (B, N, d); masked patches use the mask token."""
        x = self.patch_embed(self.patchify(images))
        if mask is not None:
            if mask.shape[-1] != x.shape[1]:
                raise ValidationError(
                    f"mask length {mask.shape[-1]} != patch count {x.shape[1]}"
                )
            m = mask.to(torch.bool)
            if m.ndim == 1:
                m = m.unsqueeze(0).expand(x.shape[0], -1)
            x = torch.where(m.unsqueeze(-1), self.mask_token.to(x.dtype), x)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class QueryDecoder(nn.Module):
    """K learnable queries refined over visual tokens; one scalar logit per query."""

    def __init__(
        self, config: DecoderConfig, embed_dim: int, mlp_ratio: float = 4.0,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.config = config
        self.queries = nn.Parameter(torch.empty(config.num_classes, embed_dim))
        nn.init.normal_(self.queries, std=0.02)
        self.blocks = nn.ModuleList(
            DecoderBlock(embed_dim, config.heads, mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(embed_dim, 1)
        self.to(dtype)

    def set_queries(self, values) -> None:
        with torch.no_grad():
            v = torch.as_tensor(values, dtype=self.queries.dtype)
            if v.shape != self.queries.shape:
                raise ValidationError(
                    f"query init shape {tuple(v.shape)} != {tuple(self.queries.shape)}"
                )
            self.queries.copy_(v)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Logits of shape (B, K) from tokens of shape (B, N, d)."""
        if tokens.ndim != 3 or tokens.shape[-1] != self.queries.shape[-1]:
            raise ValidationError(f"expected tokens (B, N, {self.queries.shape[-1]})")
        q = self.queries.unsqueeze(0).expand(tokens.shape[0], -1, -1)
        for block in self.blocks:
            q = block(q, tokens)
        return self.head(self.norm(q)).squeeze(-1)


class MeanPoolClassifier(nn.Module):
    """Decoder-off ablation: mean-pooled tokens through a linear head."""

    def __init__(self, num_classes: int, embed_dim: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.head = nn.Linear(embed_dim, num_classes)
        self.to(dtype)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.head(tokens.mean(dim=1))


class ExpressionModel(nn.Module):
    """Encoder plus classification head (query decoder or mean-pool ablation)."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        decoder_config: DecoderConfig,
        use_decoder: bool = True,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.encoder_config = encoder_config
        self.decoder_config = decoder_config
        self.use_decoder = use_decoder
        self.encoder = Encoder(encoder_config, dtype=dtype)
        if use_decoder:
            self.decoder = QueryDecoder(
                decoder_config, encoder_config.embed_dim, encoder_config.mlp_ratio, dtype=dtype
            )
        else:
            self.decoder = MeanPoolClassifier(
                decoder_config.num_classes, encoder_config.embed_dim, dtype=dtype
            )

    @property
    def queries(self) -> torch.Tensor | None:
        return self.decoder.queries if self.use_decoder else None

    def forward(self, images: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.decoder(self.encoder(images, mask=mask))


def _check_finite(logits: torch.Tensor) -> torch.Tensor:
    logits = torch.as_tensor(logits, dtype=torch.float64)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits")
    return logits


def classifier_probs(logits: torch.Tensor) -> torch.Tensor:
    """Stable softmax over the class axis (max subtraction)."""
    logits = _check_finite(logits)
    shifted = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def confidence_response(logits: torch.Tensor) -> torch.Tensor:
    """Elementwise sigmoid of the same logits the classifier uses."""
    return torch.sigmoid(_check_finite(logits))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def encoder_sizes_match(a: EncoderConfig, b: EncoderConfig) -> bool:
    return a.to_dict() == b.to_dict()
