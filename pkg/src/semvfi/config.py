"""Profiles and YAML config loading.

Two named profiles:

* ``paper`` — full-width model matching the published parameter budget,
  batch 64, 224px crops, epoch-based schedule (5 + 25). Needs a GPU and the
  full triplet corpus.
* ``desk`` — slim flow blocks, batch 8, 128px crops and a step-based
  schedule (200 + 800) sized for a single commodity accelerator. A further
  reduced variant ``desk-cpu`` (batch 4, 64px crops, shorter schedule) keeps
  CPU-only smoke runs inside a sane wall-clock budget.

A YAML config file may override any field; schema::

    profile: desk            # base profile to start from
    model:                   # ModelConfig fields
      ifnet_widths: [64, 48, 32]
      teacher_width: 48
    extractor:               # ExtractorConfig fields
      kind: surrogate
      layer_indices: [8, 11]
    train:                   # TrainConfig fields
      batch_size: 8
      stage1_steps: 200
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import yaml

from .errors import ContractViolation
from .model import ModelConfig
from .semantics import ExtractorConfig
from .training import TrainConfig

PROFILES = {
    "paper": {
        "model": dict(ifnet_widths=(240, 150, 90), teacher_width=90),
        "train": dict(batch_size=64, crop=224, stage1_steps=4005, stage2_steps=20025),
    },
    "desk": {
        "model": dict(ifnet_widths=(64, 48, 32), teacher_width=48),
        "train": dict(batch_size=8, crop=128, stage1_steps=200, stage2_steps=800),
    },
    "desk-cpu": {
        "model": dict(ifnet_widths=(48, 32, 24), teacher_width=32),
        "train": dict(batch_size=4, crop=64, stage1_steps=60, stage2_steps=240),
    },
}


def _as_tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_config(
    config_path: str | Path | None = None,
    profile: str = "desk",
    **train_overrides,
) -> tuple[ModelConfig, TrainConfig]:
    """Resolve a (model, train) config pair from profile + optional YAML."""
    doc = {}
    if config_path is not None:
        p = Path(config_path)
        if not p.exists():
            raise ContractViolation(f"config file not found: {p}")
        doc = yaml.safe_load(p.read_text()) or {}
    profile = doc.get("profile", profile)
    if profile not in PROFILES:
        raise ContractViolation(
            f"unknown profile {profile!r}; choose one of {sorted(PROFILES)}"
        )
    base = PROFILES[profile]
    model_kwargs = {**base["model"], **_as_tuples(doc.get("model", {}))}
    extractor_kwargs = _as_tuples(doc.get("extractor", {}))
    if "layer_indices" in extractor_kwargs:
        extractor_kwargs["layer_indices"] = tuple(extractor_kwargs["layer_indices"])
    train_kwargs = {**base["train"], **_as_tuples(doc.get("train", {})), **train_overrides}
    model_cfg = ModelConfig(
        **model_kwargs, extractor=ExtractorConfig(**extractor_kwargs)
    )
    return model_cfg, TrainConfig(**train_kwargs)


def steps_from_epochs(n_records: int, batch_size: int, epochs: int) -> int:
    return max(1, n_records // batch_size) * epochs
