"""Coarse-to-fine flow backbone and the residual fusion network.

The geometry stage (flow estimator + context pyramid) stays frozen for the
whole training schedule; the fusion U-Net is the only backbone piece that is
ever fine-tuned. The fusion encoder exposes two additive injection ports
(128ch at H/4, 256ch at H/8) which are zero-filled in baseline mode, so an
empty injection reproduces the unmodified backbone bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolation
from .warping import backward_warp, resize_flow

FLOW_STRIDES = (4, 2, 1)
TOTAL_STRIDE = 32
PORT_CHANNELS = {"s2": 128, "s3": 256}
PORT_STRIDES = {"s2": 4, "s3": 8}


def conv(in_planes, out_planes, kernel_size=3, stride=1, padding=1):
    return nn.Sequential(
        nn.Conv2d(in_planes, out_planes, kernel_size, stride, padding, bias=True),
        nn.LeakyReLU(0.2, True),
    )


class Conv2(nn.Module):
    """Stride-2 double conv used by the context and fusion networks."""

    def __init__(self, in_planes, out_planes, stride=2):
        super().__init__()
        self.conv1 = conv(in_planes, out_planes, 3, stride, 1)
        self.conv2 = conv(out_planes, out_planes, 3, 1, 1)

    def forward(self, x):
        return self.conv2(self.conv1(x))


def deconv(in_planes, out_planes):
    return nn.Sequential(
        nn.ConvTranspose2d(in_planes, out_planes, 4, 2, 1, bias=True),
        nn.LeakyReLU(0.2, True),
    )


@dataclass
class FlowLevel:
    """Flow estimate at one pyramid level; displacements in pixels at this level."""

    stride: int
    flow_t0: torch.Tensor
    flow_t1: torch.Tensor
    mask: torch.Tensor
    coarse: torch.Tensor


@dataclass
class FlowBundle:
    """Bidirectional flow, fusion mask and coarse blend, coarse-to-fine."""

    pyramid: list[FlowLevel] = field(default_factory=list)

    @property
    def flow_t0(self) -> torch.Tensor:
        return self.pyramid[-1].flow_t0

    @property
    def flow_t1(self) -> torch.Tensor:
        return self.pyramid[-1].flow_t1

    @property
    def mask(self) -> torch.Tensor:
        return self.pyramid[-1].mask

    @property
    def coarse(self) -> torch.Tensor:
        return self.pyramid[-1].coarse

    def flow4(self) -> torch.Tensor:
        """Both directions stacked as (B, 4, H, W), full resolution."""
        return torch.cat([self.flow_t0, self.flow_t1], dim=1)


@dataclass
class FusionOutput:
    residual: torch.Tensor
    final: torch.Tensor


@dataclass
class InjectionPorts:
    """Optional additive contributions to the fusion encoder.

    ``s2`` is added to the 128-channel H/4 feature, ``s3`` to the
    256-channel H/8 feature. Both must be filled or both empty.
    """

    s2: torch.Tensor | None = None
    s3: torch.Tensor | None = None

    def is_empty(self) -> bool:
        return self.s2 is None and self.s3 is None

    def validate(self, h: int, w: int) -> None:
        if (self.s2 is None) != (self.s3 is None):
            raise ContractViolation("injection ports must be both empty or both filled")
        if self.s2 is None:
            return
        want_s2 = (PORT_CHANNELS["s2"], h // 4, w // 4)
        want_s3 = (PORT_CHANNELS["s3"], h // 8, w // 8)
        if tuple(self.s2.shape[1:]) != want_s2:
            raise ContractViolation(f"s2 port shape {tuple(self.s2.shape[1:])} != {want_s2}")
        if tuple(self.s3.shape[1:]) != want_s3:
            raise ContractViolation(f"s3 port shape {tuple(self.s3.shape[1:])} != {want_s3}")


class IFBlock(nn.Module):
    """One refinement block of the coarse-to-fine flow estimator.

    Works at the resolution of its inputs: downsamples 4x internally, then
    predicts a (flow residual, mask residual) pair back at input resolution.
    """

    def __init__(self, in_planes, c=64):
        super().__init__()
        self.conv0 = nn.Sequential(
            conv(in_planes, c // 2, 3, 2, 1),
            conv(c // 2, c, 3, 2, 1),
        )
        self.convblock = nn.Sequential(*[conv(c, c) for _ in range(8)])
        self.lastconv = nn.ConvTranspose2d(c, 5, 4, 2, 1)

    def forward(self, x):
        feat = self.conv0(x)
        feat = self.convblock(feat) + feat
        tmp = self.lastconv(feat)
        tmp = F.interpolate(tmp, scale_factor=2.0, mode="bilinear", align_corners=False)
        flow = tmp[:, :4] * 2.0
        mask = tmp[:, 4:5]
        return flow, mask


class IFNet(nn.Module):
    """Three-block intermediate flow estimator.

    Each block refines the running bidirectional flow at strides 4/2/1.
    Inputs per block: the two frames warped by the current flow, the mask
    logits, a timestep plane, and the flow itself (8 + 4 channels).
    """

    def __init__(self, widths=(240, 150, 90)):
        super().__init__()
        if len(widths) != len(FLOW_STRIDES):
            raise ContractViolation(f"need {len(FLOW_STRIDES)} block widths, got {len(widths)}")
        self.blocks = nn.ModuleList([IFBlock(8 + 4, c=w) for w in widths])

    def forward(self, i0: torch.Tensor, i1: torch.Tensor, t: float | torch.Tensor = 0.5) -> FlowBundle:
        b, _, h, w = i0.shape
        if i0.shape != i1.shape:
            raise ContractViolation(f"frame shapes differ: {tuple(i0.shape)} vs {tuple(i1.shape)}")
        if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
            raise ContractViolation(
                f"spatial dims must be divisible by {TOTAL_STRIDE} here; pad upstream"
            )
        if not torch.is_tensor(t):
            t = torch.full((b, 1, 1, 1), float(t), device=i0.device, dtype=i0.dtype)

        bundle = FlowBundle()
        flow = None
        mask_logits = None
        for block, stride in zip(self.blocks, FLOW_STRIDES):
            hs, ws = h // stride, w // stride
            if stride == 1:
                i0_s, i1_s = i0, i1
            else:
                i0_s = F.interpolate(i0, size=(hs, ws), mode="bilinear", align_corners=False)
                i1_s = F.interpolate(i1, size=(hs, ws), mode="bilinear", align_corners=False)
            if flow is None:
                flow = i0_s.new_zeros(b, 4, hs, ws)
                mask_logits = i0_s.new_zeros(b, 1, hs, ws)
                w0, w1 = i0_s, i1_s
            else:
                flow = torch.cat(
                    [resize_flow(flow[:, :2], (hs, ws)), resize_flow(flow[:, 2:], (hs, ws))], 1
                )
                mask_logits = F.interpolate(
                    mask_logits, size=(hs, ws), mode="bilinear", align_corners=False
                )
                w0 = backward_warp(i0_s, flow[:, :2])
                w1 = backward_warp(i1_s, flow[:, 2:])
            t_plane = t.expand(b, 1, hs, ws)
            x = torch.cat([w0, w1, mask_logits, t_plane, flow], dim=1)
            d_flow, d_mask = block(x)
            flow = flow + d_flow
            mask_logits = mask_logits + d_mask

            mask = torch.sigmoid(mask_logits)
            w0 = backward_warp(i0_s, flow[:, :2])
            w1 = backward_warp(i1_s, flow[:, 2:])
            coarse = mask * w0 + (1 - mask) * w1
            bundle.pyramid.append(
                FlowLevel(stride, flow[:, :2], flow[:, 2:], mask, coarse.clamp(0, 1))
            )
        return bundle


class ContextNet(nn.Module):
    """Pyramidal context features, warped to the intermediate frame.

    Four levels at strides 2/4/8/16 with widths c/2c/4c/8c; each level is
    warped with the flow resized (and magnitude-rescaled) to its stride.
    """

    def __init__(self, c=16):
        super().__init__()
        self.width = c
        self.conv1 = Conv2(3, c)
        self.conv2 = Conv2(c, 2 * c)
        self.conv3 = Conv2(2 * c, 4 * c)
        self.conv4 = Conv2(4 * c, 8 * c)

    def forward(self, img: torch.Tensor, flow: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        x = img
        for stage in (self.conv1, self.conv2, self.conv3, self.conv4):
            x = stage(x)
            level_flow = resize_flow(flow, tuple(x.shape[2:]))
            feats.append(backward_warp(x, level_flow))
        return feats


class FusionNet(nn.Module):
    """Residual refinement U-Net with two additive injection ports.

    Encoder widths are pinned by the port contract: 128 channels at H/4 and
    256 at H/8. Injection is strictly additive right after the encoder stage
    that produces each port's feature, so a zero (or absent) injection leaves
    the baseline computation untouched.
    """

    def __init__(self, ctx_width=16, base_width=32):
        super().__init__()
        c = ctx_width
        self.down0 = Conv2(17, base_width)
        self.down1 = Conv2(base_width + 2 * c, PORT_CHANNELS["s2"])
        self.down2 = Conv2(PORT_CHANNELS["s2"] + 4 * c, PORT_CHANNELS["s3"])
        self.down3 = Conv2(PORT_CHANNELS["s3"] + 8 * c, 256)
        self.up0 = deconv(256 + 16 * c, 128)
        self.up1 = deconv(128 + PORT_CHANNELS["s3"], 64)
        self.up2 = deconv(64 + PORT_CHANNELS["s2"], 32)
        self.up3 = deconv(32 + base_width, 16)
        self.out_conv = nn.Conv2d(16, 3, 3, 1, 1)

    def forward(self, i0, i1, w0, w1, mask, flow, ctx0, ctx1, ports: InjectionPorts):
        ports.validate(i0.shape[2], i0.shape[3])
        s0 = self.down0(torch.cat([i0, i1, w0, w1, mask, flow], dim=1))
        s1 = self.down1(torch.cat([s0, ctx0[0], ctx1[0]], dim=1))
        if ports.s2 is not None:
            s1 = s1 + ports.s2
        s2 = self.down2(torch.cat([s1, ctx0[1], ctx1[1]], dim=1))
        if ports.s3 is not None:
            s2 = s2 + ports.s3
        s3 = self.down3(torch.cat([s2, ctx0[2], ctx1[2]], dim=1))
        x = self.up0(torch.cat([s3, ctx0[3], ctx1[3]], dim=1))
        x = self.up1(torch.cat([x, s2], dim=1))
        x = self.up2(torch.cat([x, s1], dim=1))
        x = self.up3(torch.cat([x, s0], dim=1))
        residual = torch.sigmoid(self.out_conv(x)) * 2 - 1
        return residual


@dataclass
class TeacherOutput:
    flow_t0: torch.Tensor
    flow_t1: torch.Tensor
    mask: torch.Tensor
    frame: torch.Tensor


class TeacherBlock(nn.Module):
    """Privileged refinement block used only during training.

    Sees the ground-truth middle frame and refines the student's final flow;
    its flow becomes the distillation target and its reconstruction feeds the
    teacher loss. Excluded from the inference parameter count.
    """

    def __init__(self, c=90):
        super().__init__()
        self.block = IFBlock(11 + 4, c=c)

    def forward(self, i0, i1, igt, bundle: FlowBundle, t: float | torch.Tensor = 0.5) -> TeacherOutput:
        b, _, h, w = i0.shape
        if igt.shape != i0.shape:
            raise ContractViolation("ground-truth frame shape must match inputs")
        flow = bundle.flow4()
        mask_logits = torch.logit(bundle.mask.clamp(1e-6, 1 - 1e-6))
        w0 = backward_warp(i0, flow[:, :2])
        w1 = backward_warp(i1, flow[:, 2:])
        if not torch.is_tensor(t):
            t = torch.full((b, 1, 1, 1), float(t), device=i0.device, dtype=i0.dtype)
        t_plane = t.expand(b, 1, h, w)
        x = torch.cat([w0, w1, mask_logits, t_plane, igt, flow], dim=1)
        d_flow, d_mask = self.block(x)
        flow = flow + d_flow
        mask = torch.sigmoid(mask_logits + d_mask)
        tw0 = backward_warp(i0, flow[:, :2])
        tw1 = backward_warp(i1, flow[:, 2:])
        frame = (mask * tw0 + (1 - mask) * tw1).clamp(0, 1)
        return TeacherOutput(flow[:, :2], flow[:, 2:], mask, frame)


# Official published backbone archives name their submodules block0/1/2,
# block_tea, contextnet and unet; this maps those onto the layout above.
_LEGACY_PREFIXES = {
    "block0.": "ifnet.blocks.0.",
    "block1.": "ifnet.blocks.1.",
    "block2.": "ifnet.blocks.2.",
    "block_tea.": "teacher.block.",
    "contextnet.": "contextnet.",
    "unet.": "fusionnet.",
}


def map_legacy_keys(state: dict) -> dict:
    """Rename a published-backbone state dict to this package's key schema.

    First-conv weights gain a zero slice for the timestep plane this
    implementation feeds to every flow block, which reproduces the published
    behaviour at any timestep value. Keys that fit no known prefix are kept
    unchanged so the strict loader can report them.
    """
    out = {}
    for key, value in state.items():
        key = key.removeprefix("module.")
        for old, new in _LEGACY_PREFIXES.items():
            if key.startswith(old):
                key = new + key[len(old) :]
                break
        out[key] = value
    return out
