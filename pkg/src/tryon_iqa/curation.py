"""Annotation curation: label mapping, MOS, reliability filters and splits.

Stage 1 removes unreliable annotators from each questionnaire with three
independent predicates over their raw responses (dummy-task sanity check,
near-constant answering, habitual disagreement with the per-task majority).
Stage 2 drops whole questionnaires whose remaining agreement, measured by
Krippendorff's alpha, is at or below 0.4.
"""

from __future__ import annotations

import logging
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .dataset import TripletSample, normalize_score
from .errors import DataError, ParseError

log = logging.getLogger(__name__)

LABELS = {
    "Unnatural": 1,
    "Slightly unnatural, but not noticeable": 2,
    "Completely natural": 3,
}
LABEL_TEXT = {v: k for k, v in LABELS.items()}

UNIFORM_THRESHOLD = 0.80
DISAGREEMENT_THRESHOLD = 0.60
ALPHA_THRESHOLD = 0.4


def map_label(answer, location: str | None = None) -> int:
    """Ordinal rating of a categorical answer (integers 1-3 pass through)."""
    if isinstance(answer, str):
        key = answer.strip()
        if key in LABELS:
            return LABELS[key]
        if key in ("1", "2", "3"):
            return int(key)
    elif isinstance(answer, (int, np.integer)) and not isinstance(answer, bool) and 1 <= answer <= 3:
        return int(answer)
    raise ParseError(f"unknown answer category {answer!r}", location)


@dataclass(frozen=True)
class AnnotationRecord:
    annotator_id: str
    questionnaire_id: str
    task_id: str
    triplet_id: str
    label: int
    is_dummy: bool = False
    dummy_expected: int | None = None

    def __post_init__(self) -> None:
        if self.label not in (1, 2, 3):
            raise ParseError(f"label {self.label!r} outside {{1, 2, 3}}")
        if self.is_dummy != (self.dummy_expected is not None):
            raise ParseError(f"task {self.task_id}: dummy_expected must be set exactly for dummy tasks")

    def to_dict(self) -> dict:
        d = {"annotator_id": self.annotator_id, "questionnaire_id": self.questionnaire_id,
             "task_id": self.task_id, "triplet_id": self.triplet_id, "label": self.label,
             "is_dummy": self.is_dummy}
        if self.is_dummy:
            d["dummy_expected"] = self.dummy_expected
        return d


def aggregate_mos(labels: Sequence[int]) -> float | None:
    """Mean rating, or None (with a warning) when nothing survived."""
    if len(labels) == 0:
        warnings.warn("triplet has no surviving annotations; dropped", stacklevel=2)
        return None
    return float(np.mean(labels))


# ------------------------------------------------------------------ filters

class Verdict(NamedTuple):
    passed: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.passed


def sanity_filter(responses: Iterable[AnnotationRecord], expected_dummies: int = 5,
                  min_correct: int | None = None) -> Verdict:
    """All dummy tasks must be answered as expected (``min_correct`` relaxes this)."""
    dummies = [r for r in responses if r.is_dummy]
    need = expected_dummies if min_correct is None else min_correct
    if not dummies:
        return Verdict(False, "no dummy responses")
    if len(dummies) < expected_dummies and min_correct is None:
        return Verdict(False, f"answered {len(dummies)} of {expected_dummies} dummy tasks")
    correct = sum(r.label == r.dummy_expected for r in dummies)
    if correct < need:
        return Verdict(False, f"{correct}/{len(dummies)} dummy tasks correct")
    return Verdict(True)


def uniform_response_filter(labels: Sequence[int], threshold: float = UNIFORM_THRESHOLD) -> Verdict:
    """Fail when a single category exceeds ``threshold`` of the answers."""
    if len(labels) == 0:
        return Verdict(True)
    top, count = Counter(labels).most_common(1)[0]
    share = count / len(labels)
    if share > threshold:
        return Verdict(False, f"label {top} on {count}/{len(labels)} tasks")
    return Verdict(True)


def task_majorities(cohort: dict[str, dict[str, int]]) -> dict[str, tuple[int, int]]:
    """task -> (majority label, respondent count) for tasks with a unique modal label."""
    per_task: dict[str, list[int]] = defaultdict(list)
    for answers in cohort.values():
        for task, label in answers.items():
            per_task[task].append(label)
    out = {}
    for task, labels in per_task.items():
        ranked = Counter(labels).most_common()
        if len(ranked) == 1 or ranked[0][1] > ranked[1][1]:
            out[task] = (ranked[0][0], len(labels))
    return out


def majority_disagreement_filter(annotator: str, cohort: dict[str, dict[str, int]],
                                 threshold: float = DISAGREEMENT_THRESHOLD,
                                 majorities: dict[str, tuple[int, int]] | None = None) -> Verdict:
    """Fail when the annotator contradicts the cohort majority on more than ``threshold`` of tasks.

    ``cohort`` maps annotator -> {task: label} for the whole questionnaire
    before any filtering. Tied tasks and tasks the annotator answered alone
    are not counted.
    """
    majorities = task_majorities(cohort) if majorities is None else majorities
    answers = cohort.get(annotator, {})
    counted = disagree = 0
    for task, label in answers.items():
        if task not in majorities:
            continue
        major, respondents = majorities[task]
        if respondents < 2:
            continue
        counted += 1
        disagree += label != major
    if counted and disagree / counted > threshold:
        return Verdict(False, f"disagrees with majority on {disagree}/{counted} tasks")
    return Verdict(True)


def questionnaire_filter(alpha: float, threshold: float = ALPHA_THRESHOLD) -> bool:
    """Keep a questionnaire only if alpha is strictly above the threshold."""
    return alpha > threshold


# ------------------------------------------------------------ agreement

class AlphaResult(NamedTuple):
    alpha: float
    degenerate: bool = False


def coincidence_matrix(units: Iterable[Sequence], levels: Sequence) -> np.ndarray:
    """Krippendorff coincidence counts over pairable units (>= 2 values)."""
    pos = {v: i for i, v in enumerate(levels)}
    o = np.zeros((len(levels), len(levels)))
    for values in units:
        m = len(values)
        if m < 2:
            continue
        counts = np.zeros(len(levels))
        for v in values:
            counts[pos[v]] += 1
        # ordered pairs of distinct values within the unit, weighted 1/(m-1)
        o += (np.outer(counts, counts) - np.diag(counts)) / (m - 1)
    return o


def _difference(levels: Sequence, marginals: np.ndarray, metric: str) -> np.ndarray:
    k = len(levels)
    if metric == "ordinal":
        cum = np.concatenate([[0.0], np.cumsum(marginals)])
        d = np.zeros((k, k))
        for c in range(k):
            for e in range(k):
                lo, hi = min(c, e), max(c, e)
                d[c, e] = (cum[hi + 1] - cum[lo] - (marginals[c] + marginals[e]) / 2.0) ** 2
        return d
    if metric == "interval":
        v = np.asarray(levels, dtype=np.float64)
        return (v[:, None] - v[None, :]) ** 2
    if metric == "nominal":
        return 1.0 - np.eye(k)
    raise ValueError(f"unknown difference metric {metric!r}")


def krippendorff_alpha(units: Iterable[Sequence], metric: str = "ordinal",
                       levels: Sequence | None = None) -> AlphaResult:
    """Chance-corrected agreement over ``units`` (one value list per item).

    With no expected disagreement (every pairable value identical) alpha is
    undefined; it is reported as 1.0 with ``degenerate`` set.
    """
    units = [list(u) for u in units]
    pairable = [u for u in units if len(u) >= 2]
    if not pairable:
        raise DataError("krippendorff_alpha needs at least one item with two or more values")
    if levels is None:
        levels = sorted({v for u in pairable for v in u})
    o = coincidence_matrix(pairable, levels)
    n_c = o.sum(axis=1)
    n = n_c.sum()
    delta = _difference(levels, n_c, metric)
    d_obs = float((o * delta).sum())
    d_exp = float((np.outer(n_c, n_c) * delta).sum()) / (n - 1.0)
    if d_exp == 0.0:
        return AlphaResult(1.0, True)
    return AlphaResult(1.0 - d_obs / d_exp, False)


def responses_to_units(records: Iterable[AnnotationRecord], include_dummies: bool = False) -> list[list[int]]:
    per_task: dict[str, list[int]] = defaultdict(list)
    for r in records:
        if r.is_dummy and not include_dummies:
            continue
        per_task[r.task_id].append(r.label)
    return [per_task[t] for t in sorted(per_task)]


# ------------------------------------------------------------- pipeline

@dataclass
class CurationConfig:
    tasks_per_questionnaire: int | None = 50
    dummies_per_questionnaire: int | None = 5
    min_dummy_correct: int | None = None
    uniform_threshold: float = UNIFORM_THRESHOLD
    disagreement_threshold: float = DISAGREEMENT_THRESHOLD
    alpha_threshold: float = ALPHA_THRESHOLD
    alpha_metric: str = "ordinal"


@dataclass
class CurationReport:
    questionnaires: int = 0
    annotators: int = 0
    removed: dict[str, list[str]] = field(default_factory=lambda: {
        "sanity": [], "uniform_response": [], "majority_disagreement": []})
    reasons: dict[str, list[str]] = field(default_factory=dict)
    alpha_before: dict[str, float] = field(default_factory=dict)
    alpha_after: dict[str, float] = field(default_factory=dict)
    degenerate: list[str] = field(default_factory=list)
    discarded_questionnaires: list[str] = field(default_factory=list)
    dropped_triplets: list[str] = field(default_factory=list)

    @property
    def removed_annotators(self) -> list[str]:
        return sorted({a for ids in self.removed.values() for a in ids})

    def histogram(self, which: str = "after", width: float = 0.05) -> list[tuple[float, int]]:
        """(bin lower edge, count) over [-1, 1] for the alpha distribution."""
        values = np.array(list((self.alpha_after if which == "after" else self.alpha_before).values()))
        edges = np.round(np.arange(-1.0, 1.0 + width / 2, width), 10)
        counts = np.zeros(len(edges) - 1, dtype=int)
        if values.size:
            idx = np.clip(np.floor((values + 1.0) / width + 1e-9).astype(int), 0, len(counts) - 1)
            np.add.at(counts, idx, 1)
        return [(float(e), int(c)) for e, c in zip(edges[:-1], counts)]

    def to_dict(self) -> dict:
        return {
            "questionnaires": self.questionnaires,
            "annotators": self.annotators,
            "removed": self.removed,
            "removed_counts": {k: len(v) for k, v in self.removed.items()},
            "removed_annotators": self.removed_annotators,
            "reasons": self.reasons,
            "alpha_before": self.alpha_before,
            "alpha_after": self.alpha_after,
            "alpha_mean_before": _mean(self.alpha_before.values()),
            "alpha_mean_after": _mean(self.alpha_after.values()),
            "degenerate_alpha": self.degenerate,
            "discarded_questionnaires": self.discarded_questionnaires,
            "dropped_triplets": self.dropped_triplets,
            "alpha_histogram_before": self.histogram("before"),
            "alpha_histogram_after": self.histogram("after"),
        }


def _mean(values) -> float | None:
    values = list(values)
    return float(np.mean(values)) if values else None


@dataclass
class CurationResult:
    records: list[AnnotationRecord]
    scores: dict[str, float]          # triplet_id -> MOS over surviving annotations
    counts: dict[str, int]
    report: CurationReport

    def apply(self, triplets: Iterable[TripletSample]) -> list[TripletSample]:
        """Attach MOS to triplet metadata, dropping triplets without surviving labels."""
        out = []
        for t in triplets:
            if t.triplet_id in self.scores:
                raw = self.scores[t.triplet_id]
                out.append(TripletSample(**{**t.__dict__, "raw_score": raw,
                                            "normalized_score": normalize_score(raw),
                                            "num_annotations": self.counts[t.triplet_id]}))
        return out


def _check_structure(qid: str, records: list[AnnotationRecord], cfg: CurationConfig) -> None:
    by_annotator: dict[str, list[AnnotationRecord]] = defaultdict(list)
    for r in records:
        by_annotator[r.annotator_id].append(r)
    tasks = {r.task_id for r in records}
    dummy_tasks = {r.task_id for r in records if r.is_dummy}
    if cfg.tasks_per_questionnaire is not None and len(tasks) != cfg.tasks_per_questionnaire:
        raise DataError(f"questionnaire {qid}: {len(tasks)} tasks, expected {cfg.tasks_per_questionnaire}")
    if cfg.dummies_per_questionnaire is not None and len(dummy_tasks) != cfg.dummies_per_questionnaire:
        raise DataError(f"questionnaire {qid}: {len(dummy_tasks)} dummy tasks, "
                        f"expected {cfg.dummies_per_questionnaire}")
    for ann, rs in by_annotator.items():
        seen = [r.task_id for r in rs]
        if len(seen) != len(set(seen)):
            raise DataError(f"questionnaire {qid}: annotator {ann} answered a task twice")


def curate(records: Iterable[AnnotationRecord], config: CurationConfig | None = None) -> CurationResult:
    cfg = config or CurationConfig()
    by_q: dict[str, list[AnnotationRecord]] = defaultdict(list)
    for r in records:
        by_q[r.questionnaire_id].append(r)
    report = CurationReport(questionnaires=len(by_q))
    kept: list[AnnotationRecord] = []

    for qid in sorted(by_q):
        q_records = by_q[qid]
        _check_structure(qid, q_records, cfg)
        by_ann: dict[str, list[AnnotationRecord]] = defaultdict(list)
        for r in q_records:
            by_ann[r.annotator_id].append(r)
        report.annotators += len(by_ann)
        cohort = {a: {r.task_id: r.label for r in rs if not r.is_dummy} for a, rs in by_ann.items()}
        majorities = task_majorities(cohort)
        before = krippendorff_alpha(responses_to_units(q_records), cfg.alpha_metric)
        report.alpha_before[qid] = before.alpha

        survivors = []
        for ann in sorted(by_ann):
            rs = by_ann[ann]
            checks = {
                "sanity": sanity_filter(rs, cfg.dummies_per_questionnaire or 5, cfg.min_dummy_correct),
                "uniform_response": uniform_response_filter(list(cohort[ann].values()), cfg.uniform_threshold),
                "majority_disagreement": majority_disagreement_filter(
                    ann, cohort, cfg.disagreement_threshold, majorities),
            }
            failed = [name for name, v in checks.items() if not v]
            for name in failed:
                report.removed[name].append(f"{qid}/{ann}")
            if failed:
                report.reasons[f"{qid}/{ann}"] = [checks[n].reason for n in failed]
            else:
                survivors.extend(rs)

        units = responses_to_units(survivors)
        if not any(len(u) >= 2 for u in units):
            report.discarded_questionnaires.append(qid)
            continue
        after = krippendorff_alpha(units, cfg.alpha_metric)
        report.alpha_after[qid] = after.alpha
        if after.degenerate:
            report.degenerate.append(qid)
        if questionnaire_filter(after.alpha, cfg.alpha_threshold):
            kept.extend(survivors)
        else:
            report.discarded_questionnaires.append(qid)

    labels: dict[str, list[int]] = defaultdict(list)
    for r in kept:
        if not r.is_dummy:
            labels[r.triplet_id].append(r.label)
    all_triplets = {r.triplet_id for q in by_q.values() for r in q if not r.is_dummy}
    scores, counts = {}, {}
    for tid in sorted(all_triplets):
        ls = labels.get(tid, [])
        if not ls:
            report.dropped_triplets.append(tid)
            continue
        scores[tid] = float(np.mean(ls))
        counts[tid] = len(ls)
    if report.dropped_triplets:
        log.warning("%d triplets have no surviving annotations", len(report.dropped_triplets))
    return CurationResult(kept, scores, counts, report)


# --------------------------------------------------------------- splitting

def _components(samples: Sequence[TripletSample]) -> list[list[int]]:
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for s in samples:
        a, b = find("g:" + s.garment_id), find("p:" + s.person_id)
        if a != b:
            parent[max(a, b)] = min(a, b)
    groups: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        groups[find("g:" + s.garment_id)].append(i)
    return sorted(groups.values(), key=lambda g: (-len(g), g[0]))


def split_dataset(samples: Sequence[TripletSample], ratios: Sequence[float] = (0.7, 0.1, 0.2),
                  seed: int = 0, names: Sequence[str] = ("train", "val", "test")) -> list[TripletSample]:
    """Assign splits so no garment or person identity crosses a split boundary.

    Connected components of the garment-person graph are placed greedily,
    largest first (ties in random order), into the split furthest below its
    target size.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != len(names) or np.any(ratios < 0) or ratios.sum() <= 0:
        raise DataError(f"invalid split ratios {list(ratios)}")
    ratios = ratios / ratios.sum()
    comps = _components(samples)
    rng = np.random.Generator(np.random.PCG64(seed))
    # random order within equal sizes
    keyed = sorted(((-len(c), rng.random(), c) for c in comps), key=lambda t: (t[0], t[1]))
    total = len(samples)
    targets = ratios * total
    filled = np.zeros(len(names))
    assign: dict[int, str] = {}
    for _, _, comp in keyed:
        if len(comp) > ratios.max() * total:
            warnings.warn(f"component of {len(comp)} triplets exceeds every split target; assigned to "
                          f"{names[0]}", stacklevel=2)
            k = 0
        else:
            k = int(np.argmax(targets - filled))
        filled[k] += len(comp)
        for i in comp:
            assign[i] = names[k]
    out = [TripletSample(**{**s.__dict__, "split": assign[i]}) for i, s in enumerate(samples)]
    check_identity_disjoint(out)
    return out


def check_identity_disjoint(samples: Sequence[TripletSample]) -> None:
    seen: dict[tuple[str, str], str] = {}
    for s in samples:
        for key in (("garment", s.garment_id), ("person", s.person_id)):
            prev = seen.setdefault(key, s.split)
            if prev != s.split:
                raise DataError(f"{key[0]} {key[1]} appears in splits {prev} and {s.split}")
