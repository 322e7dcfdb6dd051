"""Training objective: five weighted terms.

reconstruction (Laplacian pyramid) + flow distillation toward the privileged
teacher + teacher reconstruction + semantic consistency through the frozen
extractor + offset regularization on the deformable sampling corrections.

All reductions are means, which keeps the published weights meaningful at
any resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractViolation
from .warping import resize_flow

_GAUSS_1D = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class LossWeights:
    rec: float = 0.1
    dis: float = 0.01
    tea: float = 0.1
    sem: float = 0.5
    reg: float = 0.0001

    def __post_init__(self):
        for name in ("rec", "dis", "tea", "sem", "reg"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"loss weight {name} must be non-negative")


@dataclass
class LossBreakdown:
    rec: torch.Tensor
    dis: torch.Tensor
    tea: torch.Tensor
    sem: torch.Tensor
    reg: torch.Tensor
    total: torch.Tensor
    weights: LossWeights

    def detached(self) -> dict[str, float]:
        return {
            "rec": float(self.rec),
            "dis": float(self.dis),
            "tea": float(self.tea),
            "sem": float(self.sem),
            "reg": float(self.reg),
            "total": float(self.total),
        }


def _gauss_blur(x: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = _GAUSS_1D.to(x.device, x.dtype)
    kx = k.view(1, 1, 1, 5).expand(c, 1, 1, 5)
    ky = k.view(1, 1, 5, 1).expand(c, 1, 5, 1)
    x = F.pad(x, (2, 2, 0, 0), mode="reflect")
    x = F.conv2d(x, kx, groups=c)
    x = F.pad(x, (0, 0, 2, 2), mode="reflect")
    return F.conv2d(x, ky, groups=c)


def laplacian_pyramid(img: torch.Tensor, levels: int) -> list[torch.Tensor]:
    """Band-pass pyramid with the final low-pass residual as the last level."""
    pyr = []
    current = img
    for _ in range(levels - 1):
        blurred = _gauss_blur(current)
        down = F.avg_pool2d(blurred, 2)
        up = F.interpolate(down, size=current.shape[2:], mode="bilinear", align_corners=False)
        pyr.append(current - up)
        current = down
    pyr.append(current)
    return pyr


def laplacian_loss(pred: torch.Tensor, gt: torch.Tensor, levels: int = 5) -> torch.Tensor:
    """Sum over pyramid levels of ``2**level * mean |lap(pred) - lap(gt)|``."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if min(pred.shape[2:]) < 2 ** (levels - 1):
        raise ContractViolation(
            f"image {tuple(pred.shape[2:])} too small for a {levels}-level pyramid"
        )
    pyr_p = laplacian_pyramid(pred, levels)
    pyr_g = laplacian_pyramid(gt, levels)
    loss = pred.new_zeros(())
    for level, (a, b) in enumerate(zip(pyr_p, pyr_g)):
        loss = loss + (2.0**level) * (a - b).abs().mean()
    return loss


def distillation_mask(
    student_frame: torch.Tensor,
    teacher_frame: torch.Tensor,
    gt: torch.Tensor,
    margin: float = 0.01,
) -> torch.Tensor:
    """Privileged mask: 1 where the teacher reconstructs better by ``margin``."""
    with torch.no_grad():
        err_s = (student_frame - gt).abs().mean(dim=1, keepdim=True)
        err_t = (teacher_frame - gt).abs().mean(dim=1, keepdim=True)
        return (err_s > err_t + margin).to(student_frame.dtype)


def distillation_loss(
    student_flows: list[torch.Tensor],
    teacher_flow: torch.Tensor,
    quality_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Masked mean-abs distance between student flows and the detached teacher.

    Student entries may live at coarser strides; they are resized (with
    magnitude rescaling) to the teacher's resolution before comparison.
    """
    if not student_flows:
        raise ContractViolation("need at least one student flow level")
    teacher = teacher_flow.detach()
    size = tuple(teacher.shape[2:])
    total = teacher.new_zeros(())
    for flow in student_flows:
        if flow.shape[1] != teacher.shape[1]:
            raise ContractViolation("student/teacher flow channel mismatch")
        at_full = flow if tuple(flow.shape[2:]) == size else _resize_multi(flow, size)
        diff = (at_full - teacher).abs()
        if quality_mask is not None:
            diff = diff * quality_mask
        total = total + diff.mean()
    return total / len(student_flows)


def _resize_multi(flow: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    pairs = [resize_flow(flow[:, i : i + 2], size) for i in range(0, flow.shape[1], 2)]
    return torch.cat(pairs, dim=1)


def semantic_consistency(pred: torch.Tensor, gt: torch.Tensor, extractor) -> torch.Tensor:
    """Mean-abs feature distance through the frozen extractor, both depths."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    f_pred = extractor(pred)
    f_gt = extractor(gt)
    shallow = (f_pred.shallow - f_gt.shallow).abs().mean()
    deep = (f_pred.deep - f_gt.deep).abs().mean()
    return 0.5 * (shallow + deep)


def offset_reg(dp_s2: torch.Tensor, dp_s3: torch.Tensor) -> torch.Tensor:
    """Mean-abs offset penalty per site, summed over the two sites.

    Each argument holds that site's predicted offsets for both time
    directions (any layout; the penalty is an elementwise mean).
    """
    return dp_s2.abs().mean() + dp_s3.abs().mean()


def total_loss(
    rec: torch.Tensor,
    dis: torch.Tensor,
    tea: torch.Tensor,
    sem: torch.Tensor,
    reg: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    components = {"rec": rec, "dis": dis, "tea": tea, "sem": sem, "reg": reg}
    for name, value in components.items():
        if float(value) < 0:
            raise ContractViolation(f"loss component {name} is negative: {float(value)}")
    total = (
        weights.rec * rec
        + weights.dis * dis
        + weights.tea * tea
        + weights.sem * sem
        + weights.reg * reg
    )
    return LossBreakdown(rec, dis, tea, sem, reg, total, weights)
