"""Fidelity metrics, plugin seam, and the benchmark harness.

PSNR and SSIM are implemented here; perceptual metrics (LPIPS, FID, ...)
plug in through :class:`MetricPlugin` without this package providing their
internals. Benchmark timing wraps the model forward only, excludes warmup
iterations, and reports device metadata alongside the numbers.
"""

from __future__ import annotations

import csv
import importlib
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .data import TripletRecord, to_tensor
from .errors import ContractViolation, DataError

PSNR_CAP_DB = 99.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """``10 * log10(1 / MSE)`` on [0,1] images; exact matches cap at 99 dB."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    mse = float(((pred - gt) ** 2).double().mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(dtype, device):
    half = SSIM_WINDOW // 2
    xs = torch.arange(-half, half + 1, dtype=dtype, device=device)
    g = torch.exp(-(xs**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def to_luminance(img: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(LUMA_WEIGHTS, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
    return (img * w).sum(dim=1, keepdim=True)


def ssim(pred: torch.Tensor, gt: torch.Tensor) -> float:
    """Mean local SSIM on luminance over valid (unpadded) 11x11 windows."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if min(pred.shape[2:]) < SSIM_WINDOW:
        raise ContractViolation(
            f"image {tuple(pred.shape[2:])} smaller than the {SSIM_WINDOW}px SSIM window"
        )
    x = to_luminance(pred.double()) if pred.shape[1] == 3 else pred.double()
    y = to_luminance(gt.double()) if gt.shape[1] == 3 else gt.double()
    w = _gaussian_window(x.dtype, x.device)
    c1 = 0.01**2
    c2 = 0.03**2
    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    var_x = F.conv2d(x * x, w) - mu_x**2
    var_y = F.conv2d(y * y, w) - mu_y**2
    cov = F.conv2d(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


@dataclass
class MetricPlugin:
    """External per-sample metric: ``fn(pred, gt) -> list of floats``."""

    name: str
    fn: Callable[[torch.Tensor, torch.Tensor], list[float]]
    direction: str = "higher-better"

    def __post_init__(self):
        if self.direction not in ("higher-better", "lower-better"):
            raise ContractViolation(f"bad plugin direction {self.direction!r}")

    @property
    def arrow(self) -> str:
        return "↑" if self.direction == "higher-better" else "↓"


def load_plugin(spec: str) -> MetricPlugin:
    """Load ``module.path:attribute`` naming a :class:`MetricPlugin`."""
    if ":" not in spec:
        raise ContractViolation(f"plugin spec must be 'module:attr', got {spec!r}")
    mod_name, attr = spec.split(":", 1)
    obj = getattr(importlib.import_module(mod_name), attr)
    if not isinstance(obj, MetricPlugin):
        raise ContractViolation(f"{spec} is not a MetricPlugin")
    return obj


@dataclass
class MetricReport:
    split: str
    sample_ids: list[str] = field(default_factory=list)
    per_sample: dict[str, list[float]] = field(default_factory=dict)
    plugin_arrows: dict[str, str] = field(default_factory=dict)
    runtimes_s: list[float] = field(default_factory=list)
    device: str = "cpu"

    @property
    def sample_count(self) -> int:
        return len(self.sample_ids)

    def aggregate(self, metric: str) -> float:
        values = self.per_sample[metric]
        return sum(values) / len(values)

    @property
    def runtime_mean(self) -> float:
        return statistics.fmean(self.runtimes_s) if self.runtimes_s else 0.0

    @property
    def runtime_std(self) -> float:
        return statistics.pstdev(self.runtimes_s) if len(self.runtimes_s) > 1 else 0.0

    def metric_names(self) -> list[str]:
        return list(self.per_sample)

    def write_csv(self, path: str | Path) -> None:
        """One row per sample plus an aggregate row; fixed column order."""
        names = self.metric_names()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["split", "sample_id", *names, "runtime_s"])
            for i, sid in enumerate(self.sample_ids):
                row = [self.split, sid]
                row += [f"{self.per_sample[m][i]:.6f}" for m in names]
                row += [f"{self.runtimes_s[i]:.6f}" if self.runtimes_s else ""]
                writer.writerow(row)
            agg = [self.split, "aggregate"]
            agg += [f"{self.aggregate(m):.6f}" for m in names]
            agg += [f"{self.runtime_mean:.6f}"]
            writer.writerow(agg)


def format_table(reports: list[MetricReport]) -> str:
    """Benchmark-style text table: one row per split, arrows per metric."""
    if not reports:
        return "(no results)\n"
    names = reports[0].metric_names()
    arrows = {"psnr_db": "↑", "ssim": "↑"}
    arrows.update(reports[0].plugin_arrows)
    header = ["split", "n"] + [f"{n} {arrows.get(n, '')}".strip() for n in names] + [
        "s/frame (mean±std)",
        "device",
    ]
    rows = [header]
    for r in reports:
        rows.append(
            [r.split, str(r.sample_count)]
            + [f"{r.aggregate(n):.4f}" for n in names]
            + [f"{r.runtime_mean:.4f}±{r.runtime_std:.4f}", r.device]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def evaluate(
    model,
    records: list[TripletRecord],
    split: str = "eval",
    plugins: list[MetricPlugin] | None = None,
    warmup: int = 5,
    device: str | torch.device = "cpu",
) -> MetricReport:
    """Interpolate every triplet's middle frame and score it.

    Timing wraps only the model forward; the first ``warmup`` extra forwards
    are excluded. Metric accumulation is order-independent (plain means).
    """
    if not records:
        raise DataError("empty dataset: nothing to benchmark")
    plugins = plugins or []
    device = torch.device(device)
    model = model.to(device).eval()
    report = MetricReport(
        split=split,
        per_sample={"psnr_db": [], "ssim": []},
        plugin_arrows={p.name: p.arrow for p in plugins},
        device=str(device),
    )
    for p in plugins:
        report.per_sample[p.name] = []

    first = records[0].load()
    warm0 = to_tensor(first[0]).unsqueeze(0).to(device)
    warm1 = to_tensor(first[2]).unsqueeze(0).to(device)
    for _ in range(warmup):
        model.interpolate(warm0, warm1)

    for rec in records:
        f0, fgt, f1 = rec.load()
        i0 = to_tensor(f0).unsqueeze(0).to(device)
        i1 = to_tensor(f1).unsqueeze(0).to(device)
        gt = to_tensor(fgt).unsqueeze(0).to(device)
        start = time.perf_counter()
        pred = model.interpolate(i0, i1)
        report.runtimes_s.append(time.perf_counter() - start)
        report.sample_ids.append(rec.id)
        report.per_sample["psnr_db"].append(psnr(pred, gt))
        report.per_sample["ssim"].append(ssim(pred, gt))
        for p in plugins:
            report.per_sample[p.name].append(float(p.fn(pred, gt)[0]))
    return report
