"""Pairwise preference objective with a score regression term.

For two try-on images of the same garment-person anchor the model's
preference probability is the logistic of the score gap over a temperature;
the same transform of the human scores gives a soft target. The loss is the
soft-label cross-entropy between the two plus a squared error per image.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .dataset import TripletSample, group_by_anchor
from .errors import ConfigError, DataError, NumericError
from .tensor import Tensor

LOG_FLOOR = 1e-12


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def _logistic(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def pref_prob(score_i, score_j, tau: float):
    """P(i preferred over j) = sigmoid((score_i - score_j) / tau). Accepts tensors."""
    _check_tau(tau)
    if isinstance(score_i, Tensor) or isinstance(score_j, Tensor):
        return T.sigmoid(T.scale(T.sub(score_i, score_j), 1.0 / tau))
    return _logistic((np.asarray(score_i) - np.asarray(score_j)) / tau)


def human_pref(s_i, s_j, tau: float):
    """Soft target from human scores; same form as :func:`pref_prob`."""
    _check_tau(tau)
    return _logistic((np.asarray(s_i, dtype=np.float64) - np.asarray(s_j, dtype=np.float64)) / tau)


def soft_cross_entropy(p, q):
    """-q log p - (1-q) log(1-p), logs clamped below at 1e-12."""
    if isinstance(p, Tensor):
        q = T.as_tensor(np.asarray(q, dtype=p.data.dtype), like=p)
        one_minus_p = T.sub(1.0, p)
        return T.scale(q * T.log(p, LOG_FLOOR) + T.sub(1.0, q) * T.log(one_minus_p, LOG_FLOOR), -1.0)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    return -(q * np.log(np.maximum(p, LOG_FLOOR)) + (1 - q) * np.log(np.maximum(1 - p, LOG_FLOOR)))


def binary_entropy(q):
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(q * np.log(q) + (1 - q) * np.log(1 - q))
    return np.where((q <= 0) | (q >= 1), 0.0, h)


@dataclass(frozen=True)
class PreferencePair:
    """Two try-ons of one anchor; ``j is None`` marks a regression-only singleton."""

    anchor: tuple[str, str]
    i: TripletSample
    j: TripletSample | None = None

    def __post_init__(self) -> None:
        if self.j is not None and (self.i.anchor != self.j.anchor):
            raise DataError(f"pair {self.i.triplet_id}/{self.j.triplet_id} does not share an anchor")

    @property
    def is_pair(self) -> bool:
        return self.j is not None

    def swapped(self) -> "PreferencePair":
        return PreferencePair(self.anchor, self.j, self.i) if self.j is not None else self


def enumerate_items(samples: Sequence[TripletSample]) -> list[PreferencePair]:
    """All training items in a fixed order: C(k, 2) pairs per anchor, singletons for k = 1."""
    items = []
    for anchor, group in group_by_anchor(samples).items():
        if len(group) == 1:
            items.append(PreferencePair(anchor, group[0]))
        else:
            items.extend(PreferencePair(anchor, a, b) for a, b in itertools.combinations(group, 2))
    return items


def sample_pairs(samples: Sequence[TripletSample], seed: int, epoch: int) -> list[PreferencePair]:
    """Shuffled training items for one epoch; deterministic in (seed, epoch)."""
    if not samples:
        raise DataError("cannot sample pairs from an empty dataset")
    items = enumerate_items(samples)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))
    order = rng.permutation(len(items))
    return [items[k] for k in order]


def items_loss(scores: Tensor, index: dict[str, int], items: Sequence[PreferencePair], tau: float,
               reg_weight: float = 1.0) -> Tensor:
    """Mean loss over ``items`` given model scores for the triplets in ``index``."""
    _check_tau(tau)
    pairs = [it for it in items if it.is_pair]
    singles = [it for it in items if not it.is_pair]
    dtype = scores.data.dtype
    terms = []
    if pairs:
        ii = np.array([index[it.i.triplet_id] for it in pairs])
        jj = np.array([index[it.j.triplet_id] for it in pairs])
        s_i = np.array([it.i.score for it in pairs], dtype=dtype)
        s_j = np.array([it.j.score for it in pairs], dtype=dtype)
        psi_i, psi_j = scores[ii], scores[jj]
        p = pref_prob(psi_i, psi_j, tau)
        q = human_pref(s_i, s_j, tau)
        ce = soft_cross_entropy(p, q)
        reg = T.square(psi_i - Tensor(s_i)) + T.square(psi_j - Tensor(s_j))
        terms.append(T.sum_(ce + T.scale(reg, reg_weight)))
    if singles:
        kk = np.array([index[it.i.triplet_id] for it in singles])
        s_k = np.array([it.i.score for it in singles], dtype=dtype)
        terms.append(T.scale(T.sum_(T.square(scores[kk] - Tensor(s_k))), reg_weight))
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return T.scale(total, 1.0 / len(items))


def unique_triplets(items: Sequence[PreferencePair]) -> list[TripletSample]:
    seen: dict[str, TripletSample] = {}
    for it in items:
        seen.setdefault(it.i.triplet_id, it.i)
        if it.j is not None:
            seen.setdefault(it.j.triplet_id, it.j)
    return list(seen.values())


def pair_loss(pair: PreferencePair, model, images, tau: float, reg_weight: float = 1.0) -> Tensor:
    """Loss of a single item, forward pass included."""
    return batch_loss([pair], model, images, tau, reg_weight)


def batch_loss(items: Sequence[PreferencePair], model, images, tau: float, reg_weight: float = 1.0) -> Tensor:
    """One batched forward over the distinct triplets of ``items``, then the mean item loss."""
    triplets = unique_triplets(items)
    g, p, v = images.batch(triplets)
    scores = model.forward(g, p, v).score
    if not np.all(np.isfinite(scores.data)):
        bad = [t.triplet_id for t, s in zip(triplets, scores.data) if not math.isfinite(s)]
        raise NumericError(f"non-finite model score for triplets {bad}")
    index = {t.triplet_id: k for k, t in enumerate(triplets)}
    return items_loss(scores, index, items, tau, reg_weight)
