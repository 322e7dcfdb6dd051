"""Frozen semantic feature extraction.

Two interchangeable backends produce per-frame feature maps at two depths:

* ``pretrained-vit`` — a plain ViT-S/16 that loads weights from disk and
  returns hidden states from two intermediate blocks.
* ``surrogate`` — a seeded, weight-free stand-in built from a Gaussian
  pyramid of the image projected through a fixed orthonormal channel mixer.
  It is deterministic, Lipschitz in the input, and lets the full suite run
  without any downloaded weights.

Both are frozen: parameters never receive gradients, but gradients do flow
into the *input*, which the semantic-consistency loss relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ContractViolation

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class SemanticFeatures:
    """Per-frame feature maps from the shallow and deep extraction depths."""

    shallow: torch.Tensor
    deep: torch.Tensor
    patch_stride: int

    def __post_init__(self):
        if self.shallow.shape != self.deep.shape:
            raise ContractViolation(
                f"depth shapes differ: {tuple(self.shallow.shape)} vs {tuple(self.deep.shape)}"
            )


@dataclass
class ExtractorConfig:
    kind: str = "surrogate"
    weights_path: str | None = None
    layer_indices: tuple[int, int] = (8, 11)
    input_norm: tuple[tuple[float, ...], tuple[float, ...]] = (IMAGENET_MEAN, IMAGENET_STD)
    patch_stride: int = 16
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    num_register_tokens: int = 0
    surrogate_seed: int = 0

    def __post_init__(self):
        lo, hi = self.layer_indices
        if not (0 <= lo < hi < self.depth):
            raise ContractViolation(
                f"layer indices {self.layer_indices} must be strictly increasing and < depth {self.depth}"
            )


def _resize_to_patch_multiple(x: torch.Tensor, stride: int) -> torch.Tensor:
    h, w = x.shape[2:]
    nh = int(math.ceil(h / stride)) * stride
    nw = int(math.ceil(w / stride)) * stride
    if (nh, nw) == (h, w):
        return x
    return F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False)


class _Block(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4),
            nn.GELU(),
            nn.Linear(dim * 4, dim),
        )

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        return x


class VitExtractor(nn.Module):
    """Plain ViT feature extractor returning two intermediate hidden states.

    The class token (and register tokens, when configured) are dropped when
    reshaping the token sequence back to a spatial map. Position embeddings
    are bicubically interpolated for non-canonical grid sizes.
    """

    CANONICAL_GRID = 14

    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Conv2d(3, d, config.patch_stride, stride=config.patch_stride)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.register_tokens = (
            nn.Parameter(torch.zeros(1, config.num_register_tokens, d))
            if config.num_register_tokens
            else None
        )
        n = self.CANONICAL_GRID * self.CANONICAL_GRID
        self.pos_embed = nn.Parameter(torch.zeros(1, n + 1, d))
        self.blocks = nn.ModuleList(
            [_Block(d, config.num_heads) for _ in range(config.depth)]
        )
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        mean, std = config.input_norm
        self.register_buffer("norm_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("norm_std", torch.tensor(std).view(1, 3, 1, 1))
        if config.weights_path is None:
            raise CheckpointError("pretrained-vit extractor requires a weights_path")
        self._load(config.weights_path)
        self.requires_grad_(False)
        self.eval()

    def _load(self, path: str):
        p = Path(path)
        if not p.exists():
            raise CheckpointError(f"extractor weights not found: {p}")
        state = torch.load(p, map_location="cpu", weights_only=True)
        if "model" in state and isinstance(state["model"], dict):
            state = state["model"]
        missing, unexpected = self.load_state_dict(state, strict=False)
        missing = [k for k in missing if not k.startswith("norm_")]
        if missing or unexpected:
            raise CheckpointError(
                f"extractor weights do not match: missing={missing[:4]} unexpected={unexpected[:4]}"
            )

    def _pos_for_grid(self, hp, wp, dtype):
        cls_pos = self.pos_embed[:, :1]
        grid = self.pos_embed[:, 1:]
        g = self.CANONICAL_GRID
        if (hp, wp) != (g, g):
            grid = grid.reshape(1, g, g, -1).permute(0, 3, 1, 2)
            grid = F.interpolate(grid, size=(hp, wp), mode="bicubic", align_corners=False)
            grid = grid.permute(0, 2, 3, 1).reshape(1, hp * wp, -1)
        return cls_pos.to(dtype), grid.to(dtype)

    def forward(self, img: torch.Tensor) -> SemanticFeatures:
        stride = self.config.patch_stride
        x = _resize_to_patch_multiple(img, stride).to(self.patch_embed.weight.dtype)
        x = (x - self.norm_mean) / self.norm_std
        x = self.patch_embed(x)
        b, d, hp, wp = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        cls_pos, grid_pos = self._pos_for_grid(hp, wp, tokens.dtype)
        tokens = tokens + grid_pos
        prefix = [self.cls_token.to(tokens.dtype) + cls_pos]
        if self.register_tokens is not None:
            prefix.append(self.register_tokens.to(tokens.dtype).expand(b, -1, -1))
        tokens = torch.cat([p.expand(b, -1, -1) for p in prefix] + [tokens], dim=1)

        n_prefix = tokens.shape[1] - hp * wp
        taps = {}
        for i, block in enumerate(self.blocks):
            tokens = block(tokens)
            if i in self.config.layer_indices:
                spatial = tokens[:, n_prefix:].transpose(1, 2).reshape(b, d, hp, wp)
                taps[i] = spatial
            if i >= max(self.config.layer_indices):
                break
        lo, hi = self.config.layer_indices
        return SemanticFeatures(taps[lo], taps[hi], stride)


_BINOMIAL = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur(x: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = _BINOMIAL.to(x.dtype).to(x.device)
    kx = k.view(1, 1, 1, 5).expand(c, 1, 1, 5)
    ky = k.view(1, 1, 5, 1).expand(c, 1, 5, 1)
    x = F.pad(x, (2, 2, 0, 0), mode="reflect")
    x = F.conv2d(x, kx, groups=c)
    x = F.pad(x, (0, 0, 2, 2), mode="reflect")
    return F.conv2d(x, ky, groups=c)


class SurrogateExtractor(nn.Module):
    """Weight-free deterministic extractor for tests and desk-scale runs.

    Builds a six-level Gaussian pyramid of the frame, resizes every level to
    the patch grid and mixes the three fine (shallow) or three coarse (deep)
    levels into ``embed_dim`` channels through a fixed orthonormal
    projection drawn from the seed. All operations are linear, so the map is
    globally Lipschitz and differentiable in the input.
    """

    LEVELS = 6

    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.surrogate_seed)
        for name in ("proj_shallow", "proj_deep"):
            raw = rng.standard_normal((config.embed_dim, 9))
            q, _ = np.linalg.qr(raw)
            self.register_buffer(name, torch.from_numpy(np.ascontiguousarray(q)).float())
        self.eval()

    def _encode(self, img: torch.Tensor, hp: int, wp: int) -> list[torch.Tensor]:
        levels = []
        x = img
        for _ in range(self.LEVELS):
            levels.append(F.interpolate(x, size=(hp, wp), mode="bilinear", align_corners=False))
            if min(x.shape[2:]) >= 2:
                x = F.avg_pool2d(_blur(x), 2)
        while len(levels) < self.LEVELS:
            levels.append(levels[-1])
        return levels

    def forward(self, img: torch.Tensor) -> SemanticFeatures:
        stride = self.config.patch_stride
        x = _resize_to_patch_multiple(img, stride)
        hp, wp = x.shape[2] // stride, x.shape[3] // stride
        levels = self._encode(x, hp, wp)
        shallow_in = torch.cat(levels[:3], dim=1)
        deep_in = torch.cat(levels[3:], dim=1)
        proj_s = self.proj_shallow.to(x.dtype)
        proj_d = self.proj_deep.to(x.dtype)
        shallow = torch.einsum("dc,bchw->bdhw", proj_s, shallow_in)
        deep = torch.einsum("dc,bchw->bdhw", proj_d, deep_in)
        return SemanticFeatures(shallow, deep, stride)


def build_extractor(config: ExtractorConfig) -> nn.Module:
    if config.kind == "pretrained-vit":
        return VitExtractor(config)
    if config.kind == "surrogate":
        return SurrogateExtractor(config)
    raise ContractViolation(f"unknown extractor kind: {config.kind!r}")


@dataclass
class SharedPCA:
    mean: torch.Tensor
    components: torch.Tensor
    explained_variance_ratio: torch.Tensor


def fit_shared_pca(feature_maps: list[torch.Tensor], k: int = 3) -> SharedPCA:
    """Fit one PCA basis on the pooled token sets of several feature maps."""
    channels = feature_maps[0].shape[1]
    if k > channels:
        raise ContractViolation(f"k={k} exceeds channel count {channels}")
    tokens = torch.cat(
        [f.permute(0, 2, 3, 1).reshape(-1, channels) for f in feature_maps], dim=0
    ).double()
    mean = tokens.mean(dim=0)
    centered = tokens - mean
    _, s, vt = torch.linalg.svd(centered, full_matrices=False)
    var = s**2
    ratio = var / var.sum().clamp_min(1e-30)
    return SharedPCA(mean, vt[:k], ratio[:k])


def pca_visualize(
    f_a: SemanticFeatures, f_b: SemanticFeatures, k: int = 3, which: str = "deep"
) -> tuple[np.ndarray, np.ndarray]:
    """Project two frames' features onto a shared PCA basis.

    Both frames contribute tokens to the basis fit and the projections are
    min-max normalized jointly, so matching content gets matching colors.
    Returns two ``(H, W, k)`` arrays in ``[0, 1]``.
    """
    fa = getattr(f_a, which)
    fb = getattr(f_b, which)
    pca = fit_shared_pca([fa, fb], k=k)

    def project(f):
        c = f.shape[1]
        toks = f.permute(0, 2, 3, 1).reshape(-1, c).double() - pca.mean
        proj = toks @ pca.components.T
        return proj.reshape(*f.shape[2:], k)

    pa, pb = project(fa), project(fb)
    both = torch.cat([pa.reshape(-1, k), pb.reshape(-1, k)], dim=0)
    lo = both.min(dim=0).values
    hi = both.max(dim=0).values
    span = (hi - lo).clamp_min(1e-12)
    pa = ((pa - lo) / span).clamp(0, 1)
    pb = ((pb - lo) / span).clamp(0, 1)
    return pa.float().numpy(), pb.float().numpy()
