"""Human baseline and generalization experiments built on the metrics."""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import TripletSample, normalize_score
from .errors import ConfigError
from .metrics import METRICS, all_metrics, benchmark_table, relative_drop

# (train_samples, val_samples) -> predictor over samples
Trainer = Callable[[Sequence[TripletSample], Sequence[TripletSample]], Callable[[Sequence[TripletSample]], np.ndarray]]


@dataclass
class HumanBaseline:
    mean: dict[str, float]
    std: dict[str, float]
    runs: list[dict[str, float]]
    excluded: int


def human_baseline(ratings: Mapping[str, Sequence[int]], samples: Sequence[TripletSample],
                   repeats: int = 10, seed: int = 0) -> HumanBaseline:
    """Split each triplet's raters into two random halves; score one half against the other.

    ``ratings`` maps triplet_id -> individual ordinal labels. Triplets with a
    single rating cannot be split and are excluded.
    """
    usable = [s for s in samples if len(ratings.get(s.triplet_id, ())) >= 2]
    excluded = len(samples) - len(usable)
    if len(usable) < 2:
        raise ValueError("human baseline needs at least two triplets with two or more ratings")
    rng = np.random.Generator(np.random.PCG64(seed))
    anchors = [s.anchor for s in usable]
    runs = []
    for _ in range(repeats):
        truth, pred = [], []
        for s in usable:
            labels = np.asarray(ratings[s.triplet_id], dtype=np.float64)
            perm = rng.permutation(labels.size)
            half = labels.size // 2
            truth.append(normalize_score(labels[perm[:half]].mean()))
            pred.append(normalize_score(labels[perm[half:]].mean()))
        runs.append(all_metrics(pred, truth, anchors))
    mean = {k: float(np.mean([r[k] for r in runs])) for k in METRICS}
    std = {k: float(np.std([r[k] for r in runs])) for k in METRICS}
    return HumanBaseline(mean, std, runs, excluded)


# ---------------------------------------------------------- cross-group

@dataclass
class GroupReport:
    group: str
    known: list[str]
    blocks: dict[str, dict[str, float]]            # "K" / "U" / "K+U" -> metrics
    pair_matrix: dict[tuple[str, str], float]      # generator pair -> micro accuracy
    categories: dict[str, float]                   # "KK" / "UU" / "KU" -> mean of pair accuracies
    drops: dict[str, float] = field(default_factory=dict)


def generator_pair_accuracy(pred, samples: Sequence[TripletSample]) -> dict[tuple[str, str], float]:
    """Micro accuracy of within-anchor pairs, keyed by the (sorted) generator pair."""
    pred = np.asarray(pred, dtype=np.float64)
    groups: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        groups[s.anchor].append(i)
    hits: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])
    for idx in groups.values():
        for i, j in itertools.combinations(idx, 2):
            si, sj = samples[i].score, samples[j].score
            if si == sj:
                continue
            key = tuple(sorted((samples[i].generator_model, samples[j].generator_model)))
            ok = np.sign(pred[i] - pred[j]) == np.sign(si - sj)
            hits[key][0] += int(ok)
            hits[key][1] += 1
    return {k: c / n for k, (c, n) in hits.items()}


def _block(pred, samples) -> dict[str, float]:
    return all_metrics(pred, [s.score for s in samples], [s.anchor for s in samples])


def _check_groups(groups: Mapping[str, Sequence[str]], samples: Sequence[TripletSample]) -> None:
    tags = {s.generator_model for s in samples}
    for name, members in groups.items():
        unknown = set(members) - tags
        if unknown:
            raise ConfigError(f"group {name} references unknown generators {sorted(unknown)}")


def cross_group(samples: Sequence[TripletSample], groups: Mapping[str, Sequence[str]],
                trainer: Trainer) -> dict[str, GroupReport]:
    """Train on each group's generators only and evaluate on the full test split."""
    _check_groups(groups, samples)
    test = [s for s in samples if s.split == "test"]
    out = {}
    for name, members in groups.items():
        known = set(members)
        tr = [s for s in samples if s.split == "train" and s.generator_model in known]
        va = [s for s in samples if s.split == "val" and s.generator_model in known]
        predictor = trainer(tr, va)
        pred = np.asarray(predictor(test))
        k_idx = [i for i, s in enumerate(test) if s.generator_model in known]
        u_idx = [i for i, s in enumerate(test) if s.generator_model not in known]
        blocks = {"K+U": _block(pred, test)}
        if k_idx:
            blocks["K"] = _block(pred[k_idx], [test[i] for i in k_idx])
        if u_idx:
            blocks["U"] = _block(pred[u_idx], [test[i] for i in u_idx])
        matrix = generator_pair_accuracy(pred, test)
        cats: dict[str, list[float]] = defaultdict(list)
        for (a, b), acc in matrix.items():
            kind = "K" * ((a in known) + (b in known)) + "U" * ((a not in known) + (b not in known))
            cats[{"KK": "KK", "UU": "UU"}.get(kind, "KU")].append(acc)
        rep = GroupReport(name, sorted(known), blocks, matrix, {k: float(np.mean(v)) for k, v in cats.items()})
        if "K" in blocks:
            ref = [blocks["K"][m] for m in ("srcc", "plcc", "r2")]
            for cond in ("U", "K+U"):
                if cond in blocks:
                    rep.drops[cond] = relative_drop(ref, [blocks[cond][m] for m in ("srcc", "plcc", "r2")])
            if "KK" in rep.categories:
                for cond in ("UU", "KU"):
                    if cond in rep.categories:
                        rep.drops[cond] = relative_drop([rep.categories["KK"]], [rep.categories[cond]])
        out[name] = rep
    return out


# --------------------------------------------------------- strong-model

@dataclass
class StrongModelReport:
    held_out: list[str]
    table: list[tuple[str, float, int]]
    held_out_top: bool
    order_preserved: bool | None


def strong_model_holdout(samples: Sequence[TripletSample], held_out: Sequence[str], trainer: Trainer,
                         reference_table: Sequence[tuple[str, float, int]] | None = None) -> StrongModelReport:
    """Retrain without ``held_out`` generators and check they still lead the benchmark table."""
    _check_groups({"held_out": held_out}, samples)
    drop = set(held_out)
    tr = [s for s in samples if s.split == "train" and s.generator_model not in drop]
    va = [s for s in samples if s.split == "val" and s.generator_model not in drop]
    test = [s for s in samples if s.split == "test"]
    predictor = trainer(tr, va)
    table = benchmark_table(predictor(test), [s.generator_model for s in test])
    ranked = [g for g, _, _ in table]
    top = set(ranked[:len(drop)]) == drop
    preserved = None
    if reference_table is not None:
        ref_order = [g for g, _, _ in reference_table if g in drop]
        preserved = [g for g in ranked if g in drop] == ref_order
    return StrongModelReport(sorted(drop), table, top, preserved)
