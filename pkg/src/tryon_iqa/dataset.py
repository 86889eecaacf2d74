"""Triplet samples and the image store they reference."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

SPLITS = ("train", "val", "test")


def normalize_score(raw: float) -> float:
    """Map a mean rating in [1, 3] onto [-1, 1]."""
    return raw - 2.0


def denormalize_score(s: float) -> float:
    return s + 2.0


@dataclass
class TripletSample:
    triplet_id: str
    garment_id: str
    person_id: str
    garment_ref: str
    person_ref: str
    tryon_ref: str
    generator_model: str = ""
    reference_ref: str | None = None
    raw_score: float | None = None
    normalized_score: float | None = None
    split: str | None = None
    num_annotations: int | None = None

    def __post_init__(self) -> None:
        if self.raw_score is not None and self.normalized_score is None:
            self.normalized_score = normalize_score(self.raw_score)
        elif self.normalized_score is not None and self.raw_score is None:
            self.raw_score = denormalize_score(self.normalized_score)

    @property
    def anchor(self) -> tuple[str, str]:
        return (self.garment_id, self.person_id)

    @property
    def score(self) -> float:
        if self.normalized_score is None:
            raise ValueError(f"triplet {self.triplet_id} has no human score")
        return self.normalized_score

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def group_by_anchor(samples: Iterable[TripletSample]) -> dict[tuple[str, str], list[TripletSample]]:
    groups: dict[tuple[str, str], list[TripletSample]] = defaultdict(list)
    for s in samples:
        groups[s.anchor].append(s)
    return dict(groups)


def by_split(samples: Iterable[TripletSample], split: str) -> list[TripletSample]:
    return [s for s in samples if s.split == split]


class ImageStore:
    """Lazy ref -> preprocessed (H, W, 3) float array lookup with caching.

    ``loader`` turns a ref into an array already at model resolution.
    """

    def __init__(self, loader: Callable[[str], np.ndarray] | None = None,
                 images: Mapping[str, np.ndarray] | None = None):
        self._loader = loader
        self._cache: dict[str, np.ndarray] = dict(images or {})

    def __getitem__(self, ref: str) -> np.ndarray:
        img = self._cache.get(ref)
        if img is None:
            if self._loader is None:
                raise KeyError(ref)
            img = self._loader(ref)
            self._cache[ref] = img
        return img

    def __contains__(self, ref: str) -> bool:
        return ref in self._cache

    def __setitem__(self, ref: str, img: np.ndarray) -> None:
        self._cache[ref] = img

    def batch(self, samples: Iterable[TripletSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        samples = list(samples)
        g = np.stack([self[s.garment_ref] for s in samples])
        p = np.stack([self[s.person_ref] for s in samples])
        v = np.stack([self[s.tryon_ref] for s in samples])
        return g, p, v


@dataclass
class Dataset:
    samples: list[TripletSample]
    images: ImageStore = field(default_factory=ImageStore)

    def split(self, name: str) -> list[TripletSample]:
        return by_split(self.samples, name)
