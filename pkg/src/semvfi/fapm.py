"""Split projection adapter around the warping step.

Pre-warp: a dual-branch 1x1 compressor maps raw 384-channel semantic
features to 256 channels, with a FiLM modulation branch predicting the
affine parameters. Post-warp: a per-site residual refiner repairs warping
discontinuities with depthwise-separable convolutions and SE recalibration
and projects to the injection width (256 at the s3 site, 128 at s2).

No normalization layers anywhere; GELU activations throughout. The refiner's
final projection is zero-initialized so training starts from the shortcut.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ContractViolation

RAW_DIM = 384
COMPRESSED_DIM = 256
SITE_WIDTHS = {"s2": 128, "s3": 256}


class FilmCompressor(nn.Module):
    """Dual-branch 1x1 compressor: ``out = gamma * feature(x) + beta``.

    The modulation branch emits both affine parameter maps from one conv;
    the first half of its channels is gamma, the second half beta. One
    instance is shared across frames for a given depth.
    """

    def __init__(self, in_dim: int = RAW_DIM, out_dim: int = COMPRESSED_DIM):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.feature_branch = nn.Conv2d(in_dim, out_dim, 1)
        self.modulation_branch = nn.Conv2d(in_dim, 2 * out_dim, 1)

    def feature(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.feature_branch(x)

    def modulation(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check(x)
        m = self.modulation_branch(x)
        return m[:, : self.out_dim], m[:, self.out_dim :]

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_dim:
            raise ContractViolation(
                f"compressor expects (B,{self.in_dim},h,w), got {tuple(x.shape)}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.modulation(x)
        return gamma * self.feature(x) + beta


class SqueezeExcite(nn.Module):
    """Channel recalibration: ``x * sigmoid(mlp(global_avg_pool(x)))``."""

    def __init__(self, channels: int, ratio: int = 8):
        super().__init__()
        if channels % ratio:
            raise ContractViolation(f"channels {channels} not divisible by SE ratio {ratio}")
        hidden = channels // ratio
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c = x.shape[:2]
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(self.act(self.fc1(s))))
        return x * s.view(b, c, 1, 1)


class _DepthwiseSeparable(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.depthwise = nn.Conv2d(in_ch, in_ch, 3, padding=1, groups=in_ch)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class PostWarpRefiner(nn.Module):
    """Residual refiner applied to warped compressed features.

    ``out = shortcut(x) + inner(x)`` where the shortcut is the identity when
    the site width equals the compressed width (s3) and a 1x1 projection
    otherwise (s2). The inner branch's last projection starts at zero, so at
    initialization the refiner is exactly its shortcut.
    """

    def __init__(self, site: str, in_dim: int = COMPRESSED_DIM, se_ratio: int = 8):
        super().__init__()
        if site not in SITE_WIDTHS:
            raise ContractViolation(f"unknown refiner site {site!r}")
        self.site = site
        out_dim = SITE_WIDTHS[site]
        self.shortcut = nn.Identity() if out_dim == in_dim else nn.Conv2d(in_dim, out_dim, 1)
        self.dw1 = _DepthwiseSeparable(in_dim, out_dim)
        self.act = nn.GELU()
        self.dw2 = nn.Conv2d(out_dim, out_dim, 3, padding=1, groups=out_dim)
        self.se = SqueezeExcite(out_dim, se_ratio)
        self.out_proj = nn.Conv2d(out_dim, out_dim, 1)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != COMPRESSED_DIM:
            raise ContractViolation(
                f"refiner expects (B,{COMPRESSED_DIM},h,w), got {tuple(x.shape)}"
            )
        inner = self.act(self.dw1(x))
        inner = self.se(self.dw2(inner))
        return self.shortcut(x) + self.out_proj(inner)


class SplitFapm(nn.Module):
    """Both compressors (one per extraction depth) and both site refiners."""

    def __init__(self, se_ratio: int = 8):
        super().__init__()
        self.compress = nn.ModuleDict(
            {"shallow": FilmCompressor(), "deep": FilmCompressor()}
        )
        self.refine = nn.ModuleDict(
            {site: PostWarpRefiner(site, se_ratio=se_ratio) for site in SITE_WIDTHS}
        )
