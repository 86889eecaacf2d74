"""Procedural triplets and crowd annotations with planted ground truth.

Garments are striped colour swatches, persons are a head/torso/legs figure
on a coloured background, and a try-on paints the garment onto the torso.
Each synthetic generator corrupts its try-ons by a characteristic amount:
``garment_error`` pulls the torso toward a wrong colour, ``person_error``
shifts the non-torso regions away from the source person. The planted
human score is ``1 - garment_error - person_error`` plus bounded noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curation import LABEL_TEXT, AnnotationRecord
from .dataset import ImageStore, TripletSample, normalize_score
from .model import preprocess
from .tensor import make_rng

DEFAULT_GENERATORS = {
    # name -> mean corruption level
    "gen-a": 0.08,
    "gen-b": 0.22,
    "gen-c": 0.36,
    "gen-d": 0.50,
    "gen-e": 0.64,
}


@dataclass
class Corpus:
    samples: list[TripletSample]
    images: ImageStore
    raw_images: dict[str, np.ndarray]   # ref -> uint8 H x W x 3
    latent: dict[str, float]            # triplet_id -> noiseless planted score


def _garment(rng, h: int, w: int) -> tuple[np.ndarray, np.ndarray, int]:
    base = rng.uniform(0.1, 0.9, size=3)
    accent = rng.uniform(0.1, 0.9, size=3)
    period = int(rng.integers(3, 7))
    img = np.ones((h, w, 3))
    top, bottom, left, right = h // 8, h - h // 8, w // 6, w - w // 6
    rows = np.arange(top, bottom)
    stripe = ((rows - top) // period) % 2 == 0
    img[top:bottom, left:right] = np.where(stripe[:, None, None], base, accent)
    return img, np.stack([base, accent]), period


def _torso_box(h: int, w: int) -> tuple[int, int, int, int]:
    return h // 4, h // 2 + h // 8, w // 4, w - w // 4


def _person(rng, h: int, w: int) -> tuple[np.ndarray, dict]:
    colors = {
        "background": rng.uniform(0.15, 0.85, size=3),
        "skin": rng.uniform(0.4, 0.85, size=3),
        "shirt": rng.uniform(0.15, 0.85, size=3),
        "legs": rng.uniform(0.15, 0.6, size=3),
    }
    img = np.empty((h, w, 3))
    img[:] = colors["background"]
    t0, t1, l0, l1 = _torso_box(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    head = (yy - h // 8) ** 2 + (xx - w // 2) ** 2 <= (h // 10) ** 2
    img[head] = colors["skin"]
    img[t0:t1, l0:l1] = colors["shirt"]
    img[t1:h - h // 16, l0 + 2:l1 - 2] = colors["legs"]
    return img, colors


def _tryon(rng, person: np.ndarray, garment_colors: np.ndarray, period: int,
           garment_error: float, person_error: float, artifact: float = 0.5) -> np.ndarray:
    h, w, _ = person.shape
    out = person.copy()
    t0, t1, l0, l1 = _torso_box(h, w)
    mask = np.zeros((h, w), dtype=bool)
    mask[t0:t1, l0:l1] = True
    # person regions drift toward mid-grey plus a random tint, then get pixel
    # noise; the visible change grows linearly with the error
    tint = _unit(rng, 3)
    noise = rng.normal(0.0, 1.0, size=person.shape)
    drift = person_error * (0.8 * (0.5 - person) + 0.3 * tint + artifact * noise)
    out[~mask] = person[~mask] + drift[~mask]
    # garment colours move a fixed distance per unit error, away from the
    # nearer end of the range so the shift is never clipped away
    away = np.where(garment_colors < 0.5, 1.0, -1.0)
    colors = garment_colors + garment_error * 0.8 * away * np.abs(_unit(rng, 3))
    rows = np.arange(t0, t1)
    stripe = ((rows - t0) // period) % 2 == 0
    torso = np.where(stripe[:, None, None], colors[0], colors[1])
    torso = np.broadcast_to(torso, (t1 - t0, l1 - l0, 3))
    out[t0:t1, l0:l1] = torso + garment_error * artifact * rng.normal(0.0, 1.0, size=torso.shape)
    return np.clip(out, 0.0, 1.0)


def _unit(rng, n: int) -> np.ndarray:
    v = rng.normal(0.0, 1.0, size=n)
    return v / np.linalg.norm(v)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def make_corpus(n_anchors: int = 50, per_anchor: int = 4, generators: dict[str, float] | None = None,
                height: int = 64, width: int = 48, seed: int = 0, noise: float = 0.1,
                spread: float = 0.12, artifact: float = 0.5) -> Corpus:
    """A planted corpus of ``n_anchors * per_anchor`` triplets.

    Each anchor gets try-ons from ``per_anchor`` distinct generators. Scores
    are ``clip(1 - e_g - e_p + U(-noise, noise), -1, 1)`` where ``e_g`` and
    ``e_p`` are drawn around the generator's corruption level.
    """
    generators = dict(generators or DEFAULT_GENERATORS)
    names = sorted(generators)
    if per_anchor > len(names):
        raise ValueError("per_anchor exceeds the number of generators")
    rng = make_rng(seed)
    samples, raw, latent = [], {}, {}
    for a in range(n_anchors):
        gid, pid = f"g{a:04d}", f"p{a:04d}"
        garment, gcolors, period = _garment(rng, height, width)
        person, _ = _person(rng, height, width)
        g_ref, p_ref = f"garments/{gid}.ppm", f"persons/{pid}.ppm"
        raw[g_ref], raw[p_ref] = _to_u8(garment), _to_u8(person)
        chosen = rng.choice(len(names), size=per_anchor, replace=False)
        for k in sorted(chosen):
            gen = names[k]
            level = generators[gen]
            e_g = float(np.clip(level + rng.normal(0.0, spread), 0.0, 1.0))
            e_p = float(np.clip(level + rng.normal(0.0, spread), 0.0, 1.0))
            tid = f"t{a:04d}-{gen}"
            v_ref = f"tryons/{tid}.ppm"
            raw[v_ref] = _to_u8(_tryon(rng, person, gcolors, period, e_g, e_p, artifact))
            clean = 1.0 - e_g - e_p
            score = float(np.clip(clean + rng.uniform(-noise, noise), -1.0, 1.0))
            latent[tid] = clean
            samples.append(TripletSample(
                triplet_id=tid, garment_id=gid, person_id=pid, garment_ref=g_ref, person_ref=p_ref,
                tryon_ref=v_ref, generator_model=gen, raw_score=score + 2.0))
    store = ImageStore(images={ref: preprocess(img, height, width) for ref, img in raw.items()})
    return Corpus(samples, store, raw, latent)


def simulate_ratings(latent: float, n: int, noise: float, rng) -> list[int]:
    """``n`` ordinal ratings of a triplet whose normalized quality is ``latent``."""
    values = latent + 2.0 + rng.normal(0.0, noise, size=n)
    return [int(v) for v in np.clip(np.round(values), 1, 3)]


def annotation_fixture(seed: int = 7, n_questionnaires: int = 3, annotators_per_q: int = 6,
                       tasks: int = 50, dummies: int = 5) -> tuple[list[AnnotationRecord], set[str]]:
    """Questionnaires answered by a consistent cohort plus two planted bad annotators.

    Questionnaire 0 contains an all-"Completely natural" spammer; questionnaire
    1 contains an annotator who answers dummies correctly but inverts every
    other label. Returns the records and the ids of the planted annotators.
    """
    rng = make_rng(seed)
    records: list[AnnotationRecord] = []
    planted = {"q0-spammer", "q1-inverter"}
    for q in range(n_questionnaires):
        qid = f"q{q}"
        truth = rng.integers(1, 4, size=tasks)
        dummy_slots = set(rng.choice(tasks, size=dummies, replace=False).tolist())
        dummy_expected = {t: (1 if i % 2 == 0 else 3) for i, t in enumerate(sorted(dummy_slots))}
        annotators = [f"{qid}-a{k}" for k in range(annotators_per_q)]
        if q == 0:
            annotators[-1] = "q0-spammer"
        if q == 1:
            annotators[-1] = "q1-inverter"
        for ann in annotators:
            for t in range(tasks):
                is_dummy = t in dummy_slots
                if is_dummy:
                    expected = dummy_expected[t]
                    label = 3 if ann == "q0-spammer" else expected
                else:
                    expected = None
                    true = int(truth[t])
                    if ann == "q0-spammer":
                        label = 3
                    elif ann == "q1-inverter":
                        label = 4 - true if true != 2 else int(rng.choice([1, 3]))
                    else:
                        label = true if rng.random() < 0.85 else int(np.clip(true + rng.choice([-1, 1]), 1, 3))
                records.append(AnnotationRecord(
                    annotator_id=ann, questionnaire_id=qid, task_id=f"{qid}-t{t:02d}",
                    triplet_id=f"{qid}-dummy{t:02d}" if is_dummy else f"{qid}-x{t:02d}",
                    label=label, is_dummy=is_dummy, dummy_expected=expected))
    return records, planted


def label_text(label: int) -> str:
    return LABEL_TEXT[label]
