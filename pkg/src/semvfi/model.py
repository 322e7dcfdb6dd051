"""Full semantic-guided interpolator and its checkpoint/parameter plumbing.

The model composes a frozen geometry stage (flow estimator + context
pyramid), a frozen semantic extractor, the trainable compression/refinement
adapters, the deformable fusion sites, and the fine-tunable fusion U-Net.
With the fusion gates at zero (their initialization) the semantic branch
contributes exactly nothing and the model's output equals the plain
backbone's.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import (
    ContextNet,
    FlowBundle,
    FusionNet,
    FusionOutput,
    IFNet,
    InjectionPorts,
    TOTAL_STRIDE,
    TeacherBlock,
    TeacherOutput,
    map_legacy_keys,
)
from .dsf import DeformableFusion, DSFState
from .errors import CheckpointError, ContractViolation
from .fapm import SplitFapm
from .semantics import ExtractorConfig, SemanticFeatures, build_extractor
from .warping import backward_warp, crop_padding, pad_to_multiple, resize_flow

CHECKPOINT_PREFIXES = ("ifnet.", "contextnet.", "fusionnet.", "teacher.", "fapm.", "dsf.")

# Injection site -> (context pyramid level, stride).
SITE_LEVELS = {"s2": (1, 4), "s3": (2, 8)}


@dataclass
class ModelConfig:
    ifnet_widths: tuple[int, int, int] = (240, 150, 90)
    teacher_width: int = 90
    ctx_width: int = 16
    fusion_base_width: int = 32
    use_semantics: bool = True
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)

    def baseline(self) -> "ModelConfig":
        return replace(self, use_semantics=False)


@dataclass
class InterpolationResult:
    final: torch.Tensor
    coarse: torch.Tensor
    residual: torch.Tensor
    bundle: FlowBundle  # at padded resolution
    teacher: TeacherOutput | None = None
    dsf_states: dict[str, tuple[DSFState, DSFState]] = field(default_factory=dict)
    semantics: dict[str, SemanticFeatures] = field(default_factory=dict)
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)

    def site_offsets(self, site: str) -> torch.Tensor:
        """Both directions' offsets for a site, stacked along the batch dim."""
        state_p, state_f = self.dsf_states[site]
        return torch.cat([state_p.offsets, state_f.offsets], dim=0)


def _check_frames(*frames: torch.Tensor) -> None:
    ref = frames[0]
    for f in frames:
        if f.dim() != 4 or f.shape[1] != 3:
            raise ContractViolation(f"frames must be (B,3,H,W), got {tuple(f.shape)}")
        if f.shape != ref.shape:
            raise ContractViolation("all frames must share one shape")


class SemanticInterpolator(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c = self.config
        self.ifnet = IFNet(c.ifnet_widths)
        self.contextnet = ContextNet(c.ctx_width)
        self.fusionnet = FusionNet(c.ctx_width, c.fusion_base_width)
        self.teacher = TeacherBlock(c.teacher_width)
        if c.use_semantics:
            self.fapm = SplitFapm()
            self.dsf = nn.ModuleDict(
                {
                    site: DeformableFusion(site, ctx_channels=2 * self._ctx_level_width(level))
                    for site, (level, _) in SITE_LEVELS.items()
                }
            )
            self.extractor = build_extractor(c.extractor)
        else:
            self.fapm = None
            self.dsf = None
            self.extractor = None
        self._freeze_backbone_stage()

    def _ctx_level_width(self, level: int) -> int:
        return self.config.ctx_width * (2**level)

    def _freeze_backbone_stage(self):
        self.ifnet.requires_grad_(False)
        self.contextnet.requires_grad_(False)
        if self.extractor is not None:
            self.extractor.requires_grad_(False)

    # ----- spec-level operations -------------------------------------------------

    def estimate_flow(self, i0: torch.Tensor, i1: torch.Tensor, t: float = 0.5) -> FlowBundle:
        """Frozen bidirectional flow with the coarse-to-fine pyramid.

        Non-divisible inputs are reflect-padded to the model stride and every
        pyramid level is cropped back proportionally.
        """
        _check_frames(i0, i1)
        i0p, pad = pad_to_multiple(i0, TOTAL_STRIDE)
        i1p, _ = pad_to_multiple(i1, TOTAL_STRIDE)
        bundle = self.ifnet(i0p, i1p, t)
        if pad != (0, 0, 0, 0):
            for level in bundle.pyramid:
                s = level.stride
                lp = tuple(p // s for p in pad)
                level.flow_t0 = crop_padding(level.flow_t0, lp)
                level.flow_t1 = crop_padding(level.flow_t1, lp)
                level.mask = crop_padding(level.mask, lp)
                level.coarse = crop_padding(level.coarse, lp)
        return bundle

    def extract_context(self, img: torch.Tensor, flow: torch.Tensor) -> list[torch.Tensor]:
        return self.contextnet(img, flow)

    def fuse(
        self,
        i0: torch.Tensor,
        i1: torch.Tensor,
        bundle: FlowBundle,
        ctx0: list[torch.Tensor],
        ctx1: list[torch.Tensor],
        ports: InjectionPorts,
    ) -> FusionOutput:
        flow = bundle.flow4()
        w0 = backward_warp(i0, flow[:, :2])
        w1 = backward_warp(i1, flow[:, 2:])
        residual = self.fusionnet(i0, i1, w0, w1, bundle.mask, flow, ctx0, ctx1, ports)
        final = (bundle.coarse + residual).clamp(0, 1)
        return FusionOutput(residual, final)

    def teacher_refine(
        self, i0: torch.Tensor, i1: torch.Tensor, igt: torch.Tensor, bundle: FlowBundle, t=0.5
    ) -> TeacherOutput:
        if not self.training:
            raise ContractViolation("teacher_refine is a training-only operation")
        return self.teacher(i0, i1, igt, bundle, t)

    # ----- semantic branch -------------------------------------------------------

    def _injection(
        self, i0p: torch.Tensor, i1p: torch.Tensor, bundle: FlowBundle, ctx0, ctx1
    ) -> tuple[InjectionPorts, dict, dict]:
        with torch.no_grad():
            feats0 = self.extractor(i0p)
            feats1 = self.extractor(i1p)
        compressed = {
            ("shallow", 0): self.fapm.compress["shallow"](feats0.shallow),
            ("shallow", 1): self.fapm.compress["shallow"](feats1.shallow),
            ("deep", 0): self.fapm.compress["deep"](feats0.deep),
            ("deep", 1): self.fapm.compress["deep"](feats1.deep),
        }
        depth_for_site = {"s2": "shallow", "s3": "deep"}
        ports = {}
        states = {}
        for site, (level, stride) in SITE_LEVELS.items():
            size = (i0p.shape[2] // stride, i0p.shape[3] // stride)
            flow0 = resize_flow(bundle.flow_t0, size)
            flow1 = resize_flow(bundle.flow_t1, size)
            depth = depth_for_site[site]
            d0 = F.interpolate(
                compressed[(depth, 0)], size=size, mode="bilinear", align_corners=False
            )
            d1 = F.interpolate(
                compressed[(depth, 1)], size=size, mode="bilinear", align_corners=False
            )
            d_hat0 = self.fapm.refine[site](backward_warp(d0, flow0))
            d_hat1 = self.fapm.refine[site](backward_warp(d1, flow1))
            ctx_pair = torch.cat([ctx0[level], ctx1[level]], dim=1)
            fused, state_p, state_f = self.dsf[site](ctx_pair, d_hat0, d_hat1)
            ports[site] = fused
            states[site] = (state_p, state_f)
        return (
            InjectionPorts(s2=ports["s2"], s3=ports["s3"]),
            states,
            {"frame0": feats0, "frame1": feats1},
        )

    # ----- full forward ----------------------------------------------------------

    def forward(
        self,
        i0: torch.Tensor,
        i1: torch.Tensor,
        t: float = 0.5,
        igt: torch.Tensor | None = None,
        semantics: bool | None = None,
    ) -> InterpolationResult:
        if semantics is None:
            semantics = self.config.use_semantics
        frames = (i0, i1) if igt is None else (i0, i1, igt)
        _check_frames(*frames)
        i0p, pad = pad_to_multiple(i0, TOTAL_STRIDE)
        i1p, _ = pad_to_multiple(i1, TOTAL_STRIDE)

        bundle = self.ifnet(i0p, i1p, t)
        ctx0 = self.contextnet(i0p, bundle.flow_t0)
        ctx1 = self.contextnet(i1p, bundle.flow_t1)

        if semantics and self.config.use_semantics:
            ports, dsf_states, semantic_feats = self._injection(i0p, i1p, bundle, ctx0, ctx1)
        else:
            ports, dsf_states, semantic_feats = InjectionPorts(), {}, {}

        fused = self.fuse(i0p, i1p, bundle, ctx0, ctx1, ports)

        teacher = None
        if igt is not None and self.training:
            igt_p, _ = pad_to_multiple(igt, TOTAL_STRIDE)
            teacher = self.teacher_refine(i0p, i1p, igt_p, bundle, t)
            if pad != (0, 0, 0, 0):
                teacher = TeacherOutput(
                    teacher.flow_t0, teacher.flow_t1, teacher.mask, crop_padding(teacher.frame, pad)
                )

        return InterpolationResult(
            final=crop_padding(fused.final, pad),
            coarse=crop_padding(bundle.coarse, pad),
            residual=crop_padding(fused.residual, pad),
            bundle=bundle,
            teacher=teacher,
            dsf_states=dsf_states,
            semantics=semantic_feats,
            pad=pad,
        )

    def interpolate(self, i0: torch.Tensor, i1: torch.Tensor, t: float = 0.5) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(i0, i1, t).final

    # ----- parameter bookkeeping ---------------------------------------------------

    def parameter_groups(self) -> dict[str, nn.Module]:
        groups = {
            "ifnet": self.ifnet,
            "contextnet": self.contextnet,
            "fusionnet": self.fusionnet,
            "teacher": self.teacher,
        }
        if self.config.use_semantics:
            groups["fapm"] = self.fapm
            groups["dsf"] = self.dsf
            groups["extractor"] = self.extractor
        return groups


def interpolate_recursive(
    model: SemanticInterpolator, i0: torch.Tensor, i1: torch.Tensor, factor: int
) -> list[torch.Tensor]:
    """Midpoint bisection: produces ``factor - 1`` intermediates in time order."""
    if factor < 2 or factor & (factor - 1):
        raise ContractViolation(f"factor must be a power of two >= 2, got {factor}")

    def bisect(a: torch.Tensor, b: torch.Tensor, depth: int) -> list[torch.Tensor]:
        mid = model.interpolate(a, b)
        if depth == 1:
            return [mid]
        return bisect(a, mid, depth - 1) + [mid] + bisect(mid, b, depth - 1)

    return bisect(i0, i1, factor.bit_length() - 1)


# ----- hashing / checkpoints -------------------------------------------------------


def module_hash(module: nn.Module) -> str:
    """Order-stable SHA-256 over a module's parameters and buffers."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(model: SemanticInterpolator, path: str | Path, **extra) -> None:
    state = {
        k: v for k, v in model.state_dict().items() if k.startswith(CHECKPOINT_PREFIXES)
    }
    torch.save({"model": state, **extra}, path)


def load_checkpoint(model: SemanticInterpolator, path: str | Path, strict: bool = True) -> dict:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    payload = torch.load(p, map_location="cpu", weights_only=True)
    state = payload.get("model", payload)
    state = map_legacy_keys(state)
    own = model.state_dict()
    loadable = {}
    mismatched = []
    for key, value in state.items():
        if key in own and own[key].shape == value.shape:
            loadable[key] = value
        else:
            mismatched.append(key)
    missing = [
        k for k in own if k.startswith(CHECKPOINT_PREFIXES) and k not in loadable
    ]
    if strict and (mismatched or missing):
        raise CheckpointError(
            f"strict load failed: {len(mismatched)} unmapped/mismatched keys "
            f"(e.g. {mismatched[:3]}), {len(missing)} missing (e.g. {missing[:3]})"
        )
    model.load_state_dict(loadable, strict=False)
    return {k: v for k, v in payload.items() if k != "model"}


# ----- parameter report ------------------------------------------------------------


def _count(module: nn.Module | None) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


@dataclass
class ParamRow:
    name: str
    status: str
    params: int


def parameter_report(model: SemanticInterpolator, stage: int = 2) -> list[ParamRow]:
    """Frozen/trainable parameter breakdown, teacher excluded from inference."""
    rows = [
        ParamRow("semantic extractor", "frozen", _count(model.extractor)),
        ParamRow("flow blocks (0-2)", "frozen", _count(model.ifnet)),
        ParamRow("context pyramid", "frozen", _count(model.contextnet)),
    ]
    if model.config.use_semantics:
        rows.append(
            ParamRow(
                "fapm compressor",
                "trained",
                sum(_count(m) for m in model.fapm.compress.values()),
            )
        )
        rows.append(
            ParamRow(
                "fapm refiner",
                "trained",
                sum(_count(m) for m in model.fapm.refine.values()),
            )
        )
        rows.append(ParamRow("dsf (both sites)", "trained", _count(model.dsf)))
    fusion_status = "fine-tuned (stage 2)" if stage >= 2 else "frozen (stage 1)"
    rows.append(ParamRow("fusion net (base)", fusion_status, _count(model.fusionnet)))
    rows.append(ParamRow("teacher block (training only)", "excluded", _count(model.teacher)))
    return rows


def report_totals(rows: list[ParamRow]) -> dict[str, int]:
    frozen = sum(r.params for r in rows if r.status.startswith("frozen"))
    trainable = sum(r.params for r in rows if r.status.startswith(("trained", "fine-tuned")))
    inference = sum(r.params for r in rows if r.status != "excluded")
    return {"frozen": frozen, "trainable": trainable, "inference": inference}
