"""Shared domain types: modalities, labels, sample references and feature maps."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np


class MsadError(Exception):
    """Base class for all errors raised by this package."""


class DataError(MsadError):
    """Malformed, missing or inconsistent input data."""


class ConfigError(MsadError):
    """Invalid run configuration or command-line usage."""


class Modality(enum.Enum):
    RGB = "rgb"
    INFRARED = "infrared"
    POINTCLOUD = "pointcloud"

    @property
    def dirname(self) -> str:
        """Directory / serialization name used by the dataset layout."""
        return _DIRNAMES[self]

    @property
    def code(self) -> int:
        return _CODES[self]

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def from_code(cls, code: int) -> "Modality":
        for m, c in _CODES.items():
            if c == code:
                return m
        raise ValueError(f"unknown modality code {code}")

    @classmethod
    def parse(cls, text: str) -> "Modality":
        key = text.strip().lower()
        for m in cls:
            if key in (m.value, m.short, m.dirname.lower()):
                return m
        raise ValueError(f"unknown modality {text!r}")


_DIRNAMES = {Modality.RGB: "RGB", Modality.INFRARED: "Infrared", Modality.POINTCLOUD: "Pointcloud"}
_CODES = {Modality.RGB: 0, Modality.INFRARED: 1, Modality.POINTCLOUD: 2}
_SHORT = {Modality.RGB: "rgb", Modality.INFRARED: "ir", Modality.POINTCLOUD: "pc"}

# Canonical ordering for score vectors and reports.
MODALITY_ORDER: tuple[Modality, ...] = (Modality.RGB, Modality.INFRARED, Modality.POINTCLOUD)


def parse_modalities(text: str) -> tuple[Modality, ...]:
    """Parse ``"rgb,ir,pc"`` into a canonically ordered, de-duplicated tuple."""
    chosen = {Modality.parse(tok) for tok in text.split(",") if tok.strip()}
    if not chosen:
        raise ValueError("modality subset must be nonempty")
    return tuple(m for m in MODALITY_ORDER if m in chosen)


def subset_key(subset) -> str:
    return "+".join(m.short for m in MODALITY_ORDER if m in subset)


@dataclass(frozen=True)
class ModalityLabels:
    """Binary per-modality labels; ``None`` marks a modality as absent."""

    rgb: int | None = None
    infrared: int | None = None
    pointcloud: int | None = None

    def __post_init__(self):
        for name in ("rgb", "infrared", "pointcloud"):
            v = getattr(self, name)
            if v is not None and v not in (0, 1):
                raise ValueError(f"label for {name} must be 0 or 1, got {v!r}")

    @classmethod
    def from_mapping(cls, labels: Mapping[Modality, int | None]) -> "ModalityLabels":
        return cls(**{m.value: labels.get(m) for m in Modality})

    def get(self, modality: Modality) -> int | None:
        return getattr(self, modality.value)

    def present(self) -> dict[Modality, int]:
        return {m: self.get(m) for m in MODALITY_ORDER if self.get(m) is not None}


def derive_object_label(labels: ModalityLabels) -> int:
    """Object verdict: 1 (anomalous) iff any present modality label is 1.

    Absent modalities are ignored. Raises ``ValueError`` if none is present.
    """
    present = labels.present()
    if not present:
        raise ValueError("no modality label present")
    return int(any(v == 1 for v in present.values()))


@dataclass(frozen=True)
class SampleRef:
    category: str
    split: str
    defect: str
    sample_id: str
    paths: Mapping[Modality, Path] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.split == "train" and self.defect != "good":
            raise ValueError("train samples must have defect type 'good'")

    @property
    def key(self) -> str:
        """Identifier unique within a category: ``<split>/<defect>/<id>``."""
        return f"{self.split}/{self.defect}/{self.sample_id}"

    @property
    def is_normal(self) -> bool:
        return self.defect == "good"


@dataclass(frozen=True, eq=False)
class PatchFeatureMap:
    """Feature vectors for one sample and one modality.

    Image modalities carry a ``(rows, cols)`` grid with ``rows * cols`` vectors in
    row-major order; point clouds use ``(0, 0)`` with one vector per point.
    """

    modality: Modality
    features: np.ndarray
    grid: tuple[int, int] = (0, 0)

    def __post_init__(self):
        f = self.features
        if f.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {f.shape}")
        r, c = self.grid
        if (r, c) != (0, 0) and r * c != f.shape[0]:
            raise ValueError(f"grid {r}x{c} inconsistent with {f.shape[0]} feature rows")
        if not np.all(np.isfinite(f)):
            raise ValueError("feature map contains non-finite values")

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def count(self) -> int:
        return int(self.features.shape[0])

    @property
    def has_grid(self) -> bool:
        return self.grid != (0, 0)
