"""Slow reference implementations used to cross-check the fast paths.

Everything here is written from the textbook definitions with plain loops
and shares no code with the modules it checks.
"""

from __future__ import annotations

import math
from typing import Hashable, Sequence


def alpha_bruteforce(units: Sequence[Sequence], metric: str = "ordinal") -> float:
    """Krippendorff's alpha by explicit enumeration of value pairs."""
    units = [list(u) for u in units if len(u) >= 2]
    pooled = [v for u in units for v in u]
    n = len(pooled)
    levels = sorted(set(pooled))
    freq = {c: sum(1 for v in pooled if v == c) for c in levels}

    def delta(a, b) -> float:
        if metric == "nominal":
            return 0.0 if a == b else 1.0
        if metric == "interval":
            return float(a - b) ** 2
        if a == b:
            return 0.0
        lo, hi = min(a, b), max(a, b)
        between = sum(freq[g] for g in levels if lo <= g <= hi)
        return (between - (freq[a] + freq[b]) / 2.0) ** 2

    observed = 0.0
    for u in units:
        m = len(u)
        for i in range(m):
            for j in range(m):
                if i != j:
                    observed += delta(u[i], u[j]) / (m - 1)
    observed /= n
    expected = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                expected += delta(pooled[i], pooled[j])
    expected /= n * (n - 1)
    if expected == 0:
        return 1.0
    return 1.0 - observed / expected


def midranks(x: Sequence[float]) -> list[float]:
    out = []
    for xi in x:
        below = sum(1 for xj in x if xj < xi)
        equal = sum(1 for xj in x if xj == xi)
        out.append(1.0 + below + (equal - 1) / 2.0)
    return out


def pearson_two_pass(x: Sequence[float], y: Sequence[float]) -> float:
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def spearman_bruteforce(x, y) -> float:
    return pearson_two_pass(midranks(x), midranks(y))


def r2_direct(pred, human) -> float:
    n = len(human)
    mean = sum(human) / n
    ss_res = sum((h - p) ** 2 for p, h in zip(pred, human))
    ss_tot = sum((h - mean) ** 2 for h in human)
    return 1.0 - ss_res / ss_tot


def pairwise_bruteforce(pred, human, anchors: Sequence[Hashable]) -> tuple[float, float]:
    def sign(v):
        v = float(v)
        return (v > 0) - (v < 0)

    per_anchor: dict = {}
    for i in range(len(pred)):
        for j in range(i + 1, len(pred)):
            if anchors[i] != anchors[j] or human[i] == human[j]:
                continue
            ok = sign(pred[i] - pred[j]) == sign(human[i] - human[j])
            c, t = per_anchor.get(anchors[i], (0, 0))
            per_anchor[anchors[i]] = (c + ok, t + 1)
    correct = sum(c for c, _ in per_anchor.values())
    total = sum(t for _, t in per_anchor.values())
    macro = sum(c / t for c, t in per_anchor.values()) / len(per_anchor)
    return macro, correct / total
