"""Agreement statistics between predicted and human scores.

Undefined statistics (zero variance, no comparable pairs) return NaN and
emit :class:`UndefinedStatistic`; they are never reported as zero.
"""

from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy.stats import rankdata

from .objective import human_pref, pref_prob


class UndefinedStatistic(RuntimeWarning):
    pass


def _undefined(name: str, why: str) -> float:
    warnings.warn(f"{name} undefined: {why}", UndefinedStatistic, stacklevel=3)
    return float("nan")


def _pair(pred, human) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(human, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} predictions vs {y.size} human scores")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("scores must be finite")
    return x, y


def plcc(pred, human) -> float:
    x, y = _pair(pred, human)
    if x.size < 2:
        return _undefined("PLCC", "fewer than two samples")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(xc, xc)), np.sqrt(np.dot(yc, yc))
    if sx == 0 or sy == 0:
        return _undefined("PLCC", "zero variance")
    return float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))


def srcc(pred, human) -> float:
    """Spearman correlation: Pearson over average (mid) ranks."""
    x, y = _pair(pred, human)
    if x.size < 2:
        return _undefined("SRCC", "fewer than two samples")
    rx, ry = rankdata(x, method="average"), rankdata(y, method="average")
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        return _undefined("SRCC", "constant ranks")
    return plcc(rx, ry)


def r2(pred, human) -> float:
    x, y = _pair(pred, human)
    if x.size < 2:
        return _undefined("R2", "fewer than two samples")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return _undefined("R2", "constant human scores")
    return 1.0 - float(np.sum((y - x) ** 2)) / ss_tot


def pairwise_accuracy(pred, human, anchors: Sequence[Hashable]) -> tuple[float, float]:
    """(macro, micro) accuracy of within-anchor orderings.

    Pairs with tied human scores are skipped; tied predictions count as wrong.
    Micro pools all pairs, macro averages per-anchor accuracies.
    """
    x, y = _pair(pred, human)
    groups: dict[Hashable, list[int]] = defaultdict(list)
    for i, a in enumerate(anchors):
        groups[a].append(i)
    per_anchor = []
    correct = total = 0
    for idx in groups.values():
        if len(idx) < 2:
            continue
        idx = np.asarray(idx)
        dx = x[idx][:, None] - x[idx][None, :]
        dy = y[idx][:, None] - y[idx][None, :]
        upper = np.triu(np.ones_like(dx, dtype=bool), k=1) & (dy != 0)
        n = int(upper.sum())
        if n == 0:
            continue
        c = int((np.sign(dx) == np.sign(dy))[upper].sum())
        per_anchor.append(c / n)
        correct += c
        total += n
    if total == 0:
        nan = _undefined("pairwise accuracy", "no comparable pairs")
        return nan, nan
    return float(np.mean(per_anchor)), correct / total


METRICS = ("srcc", "plcc", "r2", "macro_acc", "micro_acc")


def all_metrics(pred, human, anchors) -> dict[str, float]:
    macro, micro = pairwise_accuracy(pred, human, anchors)
    return {"srcc": srcc(pred, human), "plcc": plcc(pred, human), "r2": r2(pred, human),
            "macro_acc": macro, "micro_acc": micro}


# ---------------------------------------------------------------- calibration

@dataclass
class CalibrationBin:
    lower: float
    upper: float
    mean: float
    std: float
    count: int

    @property
    def center(self) -> float:
        return (self.lower + self.upper) / 2.0


def calibration_bins(human_probs, model_probs, width: float = 0.05) -> list[CalibrationBin]:
    """Bin instances by human win probability; per bin, mean/std of the model's probability."""
    h = np.asarray(human_probs, dtype=np.float64).ravel()
    m = np.asarray(model_probs, dtype=np.float64).ravel()
    if h.shape != m.shape:
        raise ValueError("human and model probability arrays differ in length")
    nbins = int(round(1.0 / width))
    idx = np.clip(np.floor(h / width + 1e-12).astype(int), 0, nbins - 1)
    out = []
    for b in range(nbins):
        sel = m[idx == b]
        lo = round(b * width, 10)
        hi = round((b + 1) * width, 10)
        if sel.size:
            out.append(CalibrationBin(lo, hi, float(sel.mean()), float(sel.std()), int(sel.size)))
        else:
            out.append(CalibrationBin(lo, hi, float("nan"), float("nan"), 0))
    return out


def calibration_instances(pred, human, anchors, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Human and model win probabilities for every within-anchor pair.

    The ground-truth winner of a pair is the sample humans scored higher
    (the earlier sample on a tie), so human probabilities lie in [0.5, 1].
    """
    x, y = _pair(pred, human)
    groups: dict[Hashable, list[int]] = defaultdict(list)
    for i, a in enumerate(anchors):
        groups[a].append(i)
    hp, mp = [], []
    for idx in groups.values():
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                i, j = idx[a], idx[b]
                if y[j] > y[i]:
                    i, j = j, i
                hp.append(human_pref(y[i], y[j], tau))
                mp.append(pref_prob(x[i], x[j], tau))
    return np.asarray(hp, dtype=np.float64), np.asarray(mp, dtype=np.float64)


def count_inversions(bins: Sequence[CalibrationBin]) -> int:
    """Adjacent decreases among occupied bins."""
    means = [b.mean for b in bins if b.count > 0]
    return sum(1 for a, b in zip(means, means[1:]) if b < a)


# ----------------------------------------------------------------- benchmark

def benchmark_table(pred, generators: Sequence[str]) -> list[tuple[str, float, int]]:
    """(generator, mean predicted score, count), best first."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    groups: dict[str, list[float]] = defaultdict(list)
    for v, g in zip(x, generators):
        groups[g].append(v)
    rows = [(g, float(np.mean(vs)), len(vs)) for g, vs in groups.items()]
    return sorted(rows, key=lambda r: (-r[1], r[0]))


def relative_drop(known: Sequence[float], condition: Sequence[float]) -> float:
    """Mean relative decrease from ``known`` to ``condition`` across metrics."""
    k = np.asarray(known, dtype=np.float64)
    c = np.asarray(condition, dtype=np.float64)
    if k.shape != c.shape or not (np.all(np.isfinite(k)) and np.all(np.isfinite(c))):
        raise ValueError("metric vectors must be finite and equally long")
    if np.any(k <= 0):
        return _undefined("relative drop", "non-positive reference metric")
    return float(np.mean((k - c) / k))


# -------------------------------------------------------------------- report

@dataclass
class EvalReport:
    metrics: dict[str, float]
    n: int
    per_generator: list[tuple[str, float, int]] = field(default_factory=list)
    calibration: list[CalibrationBin] = field(default_factory=list)
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def undefined(self) -> list[str]:
        return [k for k, v in {**self.metrics, **self.extra}.items() if isinstance(v, float) and np.isnan(v)]

    def records(self, **tags) -> list[dict]:
        """Line-delimited form: one record per statistic."""
        out = [{"metric": k, "value": _json_float(v), **tags} for k, v in self.metrics.items()]
        out += [{"metric": k, "value": _json_float(v), **tags} for k, v in self.extra.items()]
        out += [{"metric": "generator_mean", "generator": g, "value": v, "count": n, **tags}
                for g, v, n in self.per_generator]
        out += [{"metric": "calibration_bin", "bin_center": b.center, "value": _json_float(b.mean),
                 "std": _json_float(b.std), "count": b.count, **tags} for b in self.calibration]
        if self.undefined:
            out.append({"metric": "undefined", "value": self.undefined, **tags})
        return out

    def text(self) -> str:
        lines = [f"samples: {self.n}"]
        for k, v in {**self.metrics, **self.extra}.items():
            flag = "  [undefined]" if isinstance(v, float) and np.isnan(v) else ""
            lines.append(f"{k:>16}: {v:.6f}{flag}")
        if self.per_generator:
            lines.append("per-generator mean score:")
            for g, v, n in self.per_generator:
                lines.append(f"  {g:<24} {v:+.4f}  (n={n})")
        if self.calibration:
            lines.append("calibration (human p bin -> model p mean +- std, count):")
            for b in self.calibration:
                if b.count:
                    lines.append(f"  [{b.lower:.2f}, {b.upper:.2f})  {b.mean:.4f} +- {b.std:.4f}  n={b.count}")
        return "\n".join(lines)


def _json_float(v):
    return None if isinstance(v, float) and np.isnan(v) else v


def evaluate(pred, human, anchors, generators=None, tau: float | None = None) -> EvalReport:
    rep = EvalReport(all_metrics(pred, human, anchors), n=len(np.ravel(pred)))
    if generators is not None:
        rep.per_generator = benchmark_table(pred, generators)
    if tau is not None:
        hp, mp = calibration_instances(pred, human, anchors, tau)
        rep.calibration = calibration_bins(hp, mp)
    return rep
