"""Differentiable bilinear sampling primitives.

One sampling kernel backs both image/feature warping and the deformable
alignment gather, so the oracle tests in the suite cover the exact code path
used everywhere. Out-of-bounds positions clamp to the border, which keeps
gradients defined at the image edge.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ContractViolation


def _pixel_grid(h: int, w: int, device, dtype):
    ys = torch.arange(h, device=device, dtype=dtype)
    xs = torch.arange(w, device=device, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gx, gy


def bilinear_gather(x: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Sample ``x`` at continuous pixel coordinates with border clamping.

    Args:
        x: source tensor ``(N, C, H, W)``.
        px: x-coordinates in pixels, shape ``(N, *S)``.
        py: y-coordinates in pixels, same shape as ``px``.

    Returns:
        ``(N, C, *S)`` tensor; differentiable w.r.t. ``x`` and both
        coordinate tensors.
    """
    if x.dim() != 4:
        raise ContractViolation(f"expected (N,C,H,W) source, got {tuple(x.shape)}")
    if px.shape != py.shape or px.shape[0] != x.shape[0]:
        raise ContractViolation(
            f"coordinate shapes {tuple(px.shape)} / {tuple(py.shape)} do not match "
            f"source batch {x.shape[0]}"
        )
    n, c, h, w = x.shape
    sample_shape = px.shape[1:]
    px = px.reshape(n, -1).clamp(0, w - 1)
    py = py.reshape(n, -1).clamp(0, h - 1)
    m = px.shape[1]

    x0f = px.floor()
    y0f = py.floor()
    fx = (px - x0f).unsqueeze(1)
    fy = (py - y0f).unsqueeze(1)
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = x.reshape(n, c, h * w)

    def take(ix, iy):
        idx = (iy * w + ix).unsqueeze(1).expand(n, c, m)
        return flat.gather(2, idx)

    out = (
        take(x0, y0) * (1 - fx) * (1 - fy)
        + take(x1, y0) * fx * (1 - fy)
        + take(x0, y1) * (1 - fx) * fy
        + take(x1, y1) * fx * fy
    )
    return out.reshape(n, c, *sample_shape)


def backward_warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``x`` by a flow field: ``out(p) = x(p + flow(p))``.

    ``flow`` holds ``(dx, dy)`` displacements in pixels at the resolution of
    ``x``. Border samples clamp to the edge.
    """
    if x.dim() != 4 or flow.dim() != 4:
        raise ContractViolation("backward_warp expects 4-D input and flow")
    if flow.shape[1] != 2:
        raise ContractViolation(f"flow must have 2 channels (dx, dy), got {flow.shape[1]}")
    if x.shape[0] != flow.shape[0] or x.shape[2:] != flow.shape[2:]:
        raise ContractViolation(
            f"spatial/batch mismatch: input {tuple(x.shape)} vs flow {tuple(flow.shape)}"
        )
    n, _, h, w = x.shape
    gx, gy = _pixel_grid(h, w, x.device, flow.dtype)
    px = gx.unsqueeze(0) + flow[:, 0]
    py = gy.unsqueeze(0) + flow[:, 1]
    return bilinear_gather(x, px, py)


def resize_flow(flow: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resize a flow field and rescale its magnitudes to match.

    Displacements stay in pixels at the *target* resolution, so a flow moved
    from stride 1 to stride 4 has its magnitudes divided by 4.
    """
    h, w = flow.shape[2:]
    nh, nw = size
    if (nh, nw) == (h, w):
        return flow
    out = F.interpolate(flow, size=(nh, nw), mode="bilinear", align_corners=False)
    scale = torch.tensor([nw / w, nh / h], device=flow.device, dtype=flow.dtype)
    return out * scale.view(1, 2, 1, 1)


def pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int, int, int]]:
    """Reflect-pad so H and W are divisible by ``multiple``.

    Returns the padded tensor and the ``(left, right, top, bottom)`` amounts,
    to be undone with :func:`crop_padding`. Reflection needs the pad to be
    smaller than the padded dimension.
    """
    h, w = x.shape[2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    pad = (0, pw, 0, ph)
    if ph == 0 and pw == 0:
        return x, pad
    if pw >= w or ph >= h:
        raise ContractViolation(
            f"input {h}x{w} too small to reflect-pad to a multiple of {multiple}"
        )
    return F.pad(x, pad, mode="reflect"), pad


def crop_padding(x: torch.Tensor, pad: tuple[int, int, int, int]) -> torch.Tensor:
    left, right, top, bottom = pad
    h, w = x.shape[2:]
    return x[:, :, top : h - bottom, left : w - right]
