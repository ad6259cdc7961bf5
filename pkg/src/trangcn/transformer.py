"""Transformer branch: three ways of building the token sequence, one encoder.

* ``rawp``     -- flattened p x p image patches
* ``cnn``      -- one token per location of the final conv feature map
* ``keypoint`` -- windows of the early conv features around each detected keypoint

The classification token is appended after the content tokens and receives a
positional encoding like every other row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .conv import ConvFeatures
from .errors import ConfigError, ShapeError
from .layers import normalize_image


@dataclass
class TokenSequence:
    tokens: torch.Tensor        # (B, N_tok + 1, D), cls token last
    pos_encoding: torch.Tensor  # (N_tok + 1, D)
    grid: tuple[int, int] | None = None  # spatial layout of the content tokens, if any

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2] - 1

    def embedded(self) -> torch.Tensor:
        return self.tokens + self.pos_encoding


@dataclass
class EncoderOutput:
    sequence: torch.Tensor  # (B, N_tok + 1, D)
    grid: tuple[int, int] | None = None
    attention: list[torch.Tensor] = field(default_factory=list)  # per layer, (B, h, N+1, N+1)

    @property
    def cls_embedding(self) -> torch.Tensor:
        return self.sequence[..., -1, :]


def scaled_index(coord: torch.Tensor, src_size: int, dst_size: int) -> torch.Tensor:
    """Map a cell index on a ``src_size`` grid to the cell of a ``dst_size`` grid containing its center."""
    idx = torch.floor((coord + 0.5) * (dst_size / src_size)).long()
    return idx.clamp_(0, dst_size - 1)


def patchify(images: torch.Tensor, p: int) -> torch.Tensor:
    """(B, 3, R, C) -> (B, (R/p)(C/p), p*p*3), patches row-major, pixels channel-last."""
    b, c, rows, cols = images.shape
    if rows % p or cols % p:
        raise ShapeError(f"patch size {p} does not divide image size {rows}x{cols}")
    x = images.reshape(b, c, rows // p, p, cols // p, p)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, (rows // p) * (cols // p), p * p * c)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError("heads", f"d_model={dim} is not divisible by heads={heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q, k, v = self._split(self.w_q(x)), self._split(self.w_k(x)), self._split(self.w_v(x))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = logits.softmax(dim=-1)
        heads = (weights @ v).transpose(1, 2).reshape(x.shape)
        return self.w_o(heads), weights


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.GELU(), nn.Linear(ffn_mult * dim, dim))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attn_out, weights = self.attn(self.norm1(x))
        x = x + attn_out
        x = x + self.ffn(self.norm2(x))
        return x, weights


class TransformerBranch(nn.Module):
    def __init__(self, mode: str, num_tokens: int, d_model: int = 64, heads: int = 4, depth: int = 2,
                 ffn_mult: int = 4, *, patch_size: int = 16, feature_dim: int = 64, early_dim: int = 32,
                 window: int = 3, kp_threshold: float = 0.1):
        super().__init__()
        if mode not in ("rawp", "cnn", "keypoint"):
            raise ConfigError("tokens", f"unknown token mode {mode!r}")
        if window % 2 == 0:
            raise ConfigError("kp_window", f"window must be odd, got {window}")
        if d_model % heads:
            raise ConfigError("heads", f"d_model={d_model} is not divisible by heads={heads}")
        self.mode = mode
        self.patch_size = patch_size
        self.window = window
        self.kp_threshold = kp_threshold
        in_dim = {"rawp": patch_size * patch_size * 3,
                  "cnn": feature_dim,
                  "keypoint": window * window * early_dim + 1}[mode]
        self.proj = nn.Linear(in_dim, d_model)
        self.cls_token = nn.Parameter(torch.zeros(d_model))
        self.pos_encoding = nn.Parameter(torch.zeros(num_tokens + 1, d_model))
        self.blocks = nn.ModuleList(EncoderBlock(d_model, heads, ffn_mult) for _ in range(depth))
        self.final_norm = nn.LayerNorm(d_model)

    def _sequence(self, content: torch.Tensor, grid) -> TokenSequence:
        b = content.shape[0]
        if content.shape[1] + 1 != self.pos_encoding.shape[0]:
            raise ShapeError(f"got {content.shape[1]} tokens, positional encoding holds "
                             f"{self.pos_encoding.shape[0] - 1}")
        cls = self.cls_token.to(content.dtype).expand(b, 1, -1)
        return TokenSequence(torch.cat([content, cls], dim=1), self.pos_encoding, grid)

    def tokenize_raw(self, images: torch.Tensor) -> TokenSequence:
        p = self.patch_size
        rows, cols = images.shape[-2:]
        if rows % p or cols % p:
            raise ShapeError(f"patch size {p} does not divide image size {rows}x{cols}")
        return self._sequence(self.proj(patchify(normalize_image(images), p)), (rows // p, cols // p))

    def tokenize_featuremap(self, features: ConvFeatures) -> TokenSequence:
        full = features.full
        b, c, f0, f1 = full.shape
        flat = full.permute(0, 2, 3, 1).reshape(b, f0 * f1, c)
        return self._sequence(self.proj(flat), (f0, f1))

    def keypoint_windows(self, early: torch.Tensor, keypoints: torch.Tensor,
                         pose_grid: tuple[int, int]) -> torch.Tensor:
        """(B, K, window*window*C) neighborhoods of ``early``, indices clamped at the border."""
        b, c, e0, e1 = early.shape
        r = self.window // 2
        offsets = torch.arange(-r, r + 1, device=early.device)
        cx = scaled_index(keypoints[..., 0].detach(), pose_grid[0], e0)  # (B, K)
        cy = scaled_index(keypoints[..., 1].detach(), pose_grid[1], e1)
        rows = (cx[..., :, None] + offsets).clamp(0, e0 - 1)  # (B, K, w)
        cols = (cy[..., :, None] + offsets).clamp(0, e1 - 1)
        bidx = torch.arange(b, device=early.device)[:, None, None, None]
        patch = early.permute(0, 2, 3, 1)[bidx, rows[..., :, None], cols[..., None, :]]  # (B, K, w, w, C)
        return patch.reshape(b, keypoints.shape[1], -1)

    def tokenize_keypoints(self, early: torch.Tensor, keypoints: torch.Tensor,
                           pose_grid: tuple[int, int]) -> TokenSequence:
        conf = keypoints[..., 2:3]
        windows = self.keypoint_windows(early, keypoints, pose_grid)
        tokens = self.proj(torch.cat([windows, conf], dim=-1))
        visible = (conf.detach() >= self.kp_threshold).to(tokens.dtype)
        return self._sequence(tokens * visible, None)

    def encode(self, seq: TokenSequence, keep_attention: bool = False) -> EncoderOutput:
        x = seq.embedded()
        attention = []
        for block in self.blocks:
            x, weights = block(x)
            if keep_attention:
                attention.append(weights)
        return EncoderOutput(self.final_norm(x), seq.grid, attention)

    def tokenize(self, images=None, features: ConvFeatures | None = None, keypoints=None,
                 pose_grid=None) -> TokenSequence:
        if self.mode == "rawp":
            return self.tokenize_raw(images)
        if self.mode == "cnn":
            return self.tokenize_featuremap(features)
        return self.tokenize_keypoints(features.early, keypoints, pose_grid)
