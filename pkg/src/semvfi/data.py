"""Triplet datasets: directory-layout loaders, a synthetic generator, and
augmentation.

The synthetic generator renders anti-aliased textured shapes moving along
linear trajectories; the middle frame is the exact mid-time render, so it is
a true interpolation target with a known difficulty knob (motion magnitude).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ContractViolation, DataError


@dataclass
class FrameTriplet:
    """One training/eval batch: two inputs, the ground-truth middle, timestep."""

    i0: torch.Tensor
    i1: torch.Tensor
    igt: torch.Tensor
    t: float = 0.5

    def __post_init__(self):
        if not (self.i0.shape == self.i1.shape == self.igt.shape):
            raise ContractViolation("triplet frames must share one shape")
        if not 0.0 < self.t < 1.0:
            raise ContractViolation(f"timestep must lie in (0,1), got {self.t}")


@dataclass
class TripletRecord:
    """Pointer to one triplet: either file paths or in-memory frames."""

    id: str
    paths: tuple[Path, Path, Path] | None = None
    frames: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def load(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (i0, igt, i1) as float32 HWC arrays in [0, 1]."""
        if self.frames is not None:
            return self.frames
        out = []
        for p in self.paths:
            if not p.exists():
                raise DataError(f"frame file missing: {p}")
            out.append(np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0)
        if not (out[0].shape == out[1].shape == out[2].shape):
            raise DataError(f"triplet {self.id}: frame dimensions differ")
        return tuple(out)


def load_vimeo_triplets(
    root: str | Path, list_file: str | Path, on_missing: str = "fail"
) -> list[TripletRecord]:
    """Parse a sequences/<a>/<b>/im{1,2,3}.png layout from a list file.

    Each list line names one ``<a>/<b>`` sequence directory; frames map to
    (i0, igt, i1) = (im1, im2, im3). Order follows the list file.
    """
    root = Path(root)
    list_path = Path(list_file)
    if not list_path.exists():
        raise DataError(f"triplet list not found: {list_path}")
    records = []
    for lineno, raw in enumerate(list_path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("/")
        if len(parts) != 2 or not all(parts) or any(" " in p for p in parts):
            raise DataError(f"{list_path.name} line {lineno}: malformed entry {raw!r}")
        seq = root / "sequences" / parts[0] / parts[1]
        paths = tuple(seq / f"im{i}.png" for i in (1, 2, 3))
        missing = [p for p in paths if not p.exists()]
        if missing:
            if on_missing == "skip":
                continue
            raise DataError(f"{list_path.name} line {lineno}: frame file missing: {missing[0]}")
        records.append(TripletRecord(id=line, paths=paths))
    return records


def load_pairlist_triplets(
    root: str | Path, list_file: str | Path, on_missing: str = "fail"
) -> list[TripletRecord]:
    """Parse a benchmark list whose lines hold three whitespace-separated
    frame paths (first, ground-truth middle, last), relative to ``root``."""
    root = Path(root)
    list_path = Path(list_file)
    if not list_path.exists():
        raise DataError(f"triplet list not found: {list_path}")
    records = []
    for lineno, raw in enumerate(list_path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{list_path.name} line {lineno}: expected 3 paths, got {len(parts)}")
        paths = tuple(root / p for p in parts)
        missing = [p for p in paths if not p.exists()]
        if missing:
            if on_missing == "skip":
                continue
            raise DataError(f"{list_path.name} line {lineno}: frame file missing: {missing[0]}")
        records.append(TripletRecord(id=f"{list_path.stem}:{lineno}", paths=(paths[0], paths[1], paths[2])))
    return records


# ----- synthetic moving-shapes triplets ------------------------------------------


def _render_scene(size: int, shapes: list[dict], bg: np.ndarray, tau: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    img = bg.copy()
    for s in shapes:
        cx, cy = s["center"] + tau * s["velocity"]
        theta = s["angle"] + tau * s["spin"]
        ct, st = np.cos(theta), np.sin(theta)
        qx = ct * (xs - cx) + st * (ys - cy)
        qy = -st * (xs - cx) + ct * (ys - cy)
        if s["kind"] == "disc":
            dist = s["radius"] - np.sqrt(qx * qx + qy * qy)
        else:
            dist = np.minimum(s["radius"] - np.abs(qx), s["aspect"] * s["radius"] - np.abs(qy))
        alpha = np.clip(dist + 0.5, 0.0, 1.0)[..., None]
        grating = np.sin(s["freq"] * qx + s["phase"]) * np.sin(s["freq"] * qy)
        color = np.clip(s["color"][None, None, :] + 0.35 * grating[..., None], 0.0, 1.0)
        img = img * (1 - alpha) + color * alpha
    return img.astype(np.float32)


def synth_triplets(
    seed: int,
    n: int,
    size: int = 128,
    motion_px_range: tuple[float, float] = (4.0, 12.0),
) -> list[TripletRecord]:
    """Render ``n`` deterministic triplets of moving textured shapes.

    Shapes translate and rotate linearly in time; the middle frame is the
    exact ``tau = 0.5`` render. Per-shape displacement magnitude is drawn
    from ``motion_px_range`` (pixels over the full frame interval).
    """
    if size < 32:
        raise ContractViolation(f"synthetic size must be >= 32, got {size}")
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
        bg_phase = rng.uniform(0, 2 * np.pi, size=2)
        bg = (
            0.35
            + 0.08 * np.sin(2 * np.pi * xs * rng.uniform(0.5, 1.5) + bg_phase[0])[..., None]
            + 0.08 * np.cos(2 * np.pi * ys * rng.uniform(0.5, 1.5) + bg_phase[1])[..., None]
            + 0.05 * rng.uniform(-1, 1, size=3)[None, None, :]
        )
        bg = np.clip(np.broadcast_to(bg, (size, size, 3)), 0.0, 1.0)
        shapes = []
        for _ in range(rng.integers(3, 6)):
            magnitude = rng.uniform(*motion_px_range)
            direction = rng.uniform(0, 2 * np.pi)
            shapes.append(
                {
                    "kind": "disc" if rng.uniform() < 0.5 else "box",
                    "center": rng.uniform(0.2 * size, 0.8 * size, size=2),
                    "velocity": magnitude * np.array([np.cos(direction), np.sin(direction)]),
                    "radius": rng.uniform(size * 0.08, size * 0.18),
                    "aspect": rng.uniform(0.5, 1.0),
                    "angle": rng.uniform(0, np.pi),
                    "spin": rng.uniform(-1, 1) * 0.02 * magnitude,
                    "freq": rng.uniform(0.25, 0.9),
                    "phase": rng.uniform(0, 2 * np.pi),
                    "color": rng.uniform(0.25, 1.0, size=3),
                }
            )
        frames = tuple(_render_scene(size, shapes, bg, tau) for tau in (0.0, 0.5, 1.0))
        records.append(TripletRecord(id=f"synth-{seed}-{i}", frames=(frames[0], frames[1], frames[2])))
    return records


# ----- augmentation ----------------------------------------------------------------


@dataclass
class AugmentConfig:
    crop: int = 128
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_reverse: float = 0.5
    random_crop: bool = True


def augment(
    rec: TripletRecord, seed: int, cfg: AugmentConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Jointly crop/flip/reverse one record; deterministic per seed.

    Temporal reversal swaps the two inputs and keeps the middle frame.
    Returns (i0, igt, i1) HWC float32 crops.
    """
    i0, igt, i1 = rec.load()
    h, w = i0.shape[:2]
    if h < cfg.crop or w < cfg.crop:
        raise ContractViolation(f"frame {h}x{w} smaller than crop {cfg.crop}")
    rng = np.random.default_rng(seed)
    if cfg.random_crop:
        top = int(rng.integers(0, h - cfg.crop + 1))
        left = int(rng.integers(0, w - cfg.crop + 1))
    else:
        top, left = (h - cfg.crop) // 2, (w - cfg.crop) // 2
    sl = np.s_[top : top + cfg.crop, left : left + cfg.crop]
    i0, igt, i1 = i0[sl], igt[sl], i1[sl]
    if rng.uniform() < cfg.p_hflip:
        i0, igt, i1 = i0[:, ::-1], igt[:, ::-1], i1[:, ::-1]
    if rng.uniform() < cfg.p_vflip:
        i0, igt, i1 = i0[::-1], igt[::-1], i1[::-1]
    if rng.uniform() < cfg.p_reverse:
        i0, i1 = i1, i0
    return np.ascontiguousarray(i0), np.ascontiguousarray(igt), np.ascontiguousarray(i1)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """HWC [0,1] float array -> (3,H,W) float tensor."""
    return torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float()


def collate(triples: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> FrameTriplet:
    i0 = torch.stack([to_tensor(t[0]) for t in triples])
    igt = torch.stack([to_tensor(t[1]) for t in triples])
    i1 = torch.stack([to_tensor(t[2]) for t in triples])
    return FrameTriplet(i0=i0, i1=i1, igt=igt)


def batch_stream(
    records: list[TripletRecord],
    batch_size: int,
    seed: int,
    epoch: int,
    cfg: AugmentConfig,
):
    """Deterministic shuffled batches; order is a pure function of (seed, epoch)."""
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start : start + batch_size]
        triples = [
            augment(records[j], seed=int(seed * 1_000_003 + epoch * 10_007 + j), cfg=cfg)
            for j in idx
        ]
        yield collate(triples)
