"""Line-delimited JSON manifests, annotation files and run configs."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterable

from .curation import AnnotationRecord, map_label
from .dataset import ImageStore, TripletSample
from .errors import ConfigError, DataError, ParseError
from .model import ModelConfig
from .ppm import load_image, write_ppm
from .train import TrainConfig

MANIFEST_FORMAT = "tryon-iqa-manifest"
MANIFEST_VERSION = 1
CONFIG_ENV = "TRYON_IQA_CONFIG"

_SAMPLE_FIELDS = set(TripletSample.__dataclass_fields__)
_REQUIRED = ("triplet_id", "garment_id", "person_id", "garment_ref", "person_ref", "tryon_ref")


def _lines(path: str | os.PathLike):
    try:
        with open(path, encoding="utf-8") as f:
            for n, line in enumerate(f, 1):
                if line.strip():
                    loc = f"{path}:{n}"
                    try:
                        yield loc, json.loads(line)
                    except json.JSONDecodeError as e:
                        raise ParseError(f"invalid JSON: {e.msg}", loc) from None
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None


def write_jsonl(path: str | os.PathLike, records: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_manifest(path: str | os.PathLike) -> list[TripletSample]:
    it = _lines(path)
    try:
        loc, header = next(it)
    except StopIteration:
        raise ParseError("empty manifest", str(path)) from None
    if header.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"missing manifest header (format={MANIFEST_FORMAT!r})", loc)
    if header.get("version") != MANIFEST_VERSION:
        raise ParseError(f"unsupported manifest version {header.get('version')!r}", loc)
    samples, seen = [], set()
    for loc, rec in it:
        if not isinstance(rec, dict):
            raise ParseError("record is not an object", loc)
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise ParseError(f"missing fields {missing}", loc)
        unknown = set(rec) - _SAMPLE_FIELDS
        if unknown:
            raise ParseError(f"unknown fields {sorted(unknown)}", loc)
        if rec["triplet_id"] in seen:
            raise ParseError(f"duplicate triplet_id {rec['triplet_id']!r}", loc)
        seen.add(rec["triplet_id"])
        try:
            samples.append(TripletSample(**rec))
        except (TypeError, ValueError) as e:
            raise ParseError(str(e), loc) from None
        s = samples[-1]
        if s.normalized_score is not None and not -1.0 <= s.normalized_score <= 1.0:
            raise ParseError(f"normalized_score {s.normalized_score} outside [-1, 1]", loc)
    return samples


def write_manifest(path: str | os.PathLike, samples: Iterable[TripletSample]) -> None:
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION}
    write_jsonl(path, [header] + [s.to_dict() for s in samples])


def image_store(manifest_path: str | os.PathLike, config: ModelConfig) -> ImageStore:
    """Images resolved relative to the manifest's directory and resized to the model."""
    base = Path(manifest_path).resolve().parent

    def load(ref: str):
        p = Path(ref) if os.path.isabs(ref) else base / ref
        if not p.exists():
            raise DataError(f"image not found: {p}")
        return load_image(p, config.image_height, config.image_width)

    return ImageStore(load)


def check_images(manifest_path, samples: Iterable[TripletSample]) -> None:
    base = Path(manifest_path).resolve().parent
    for s in samples:
        for ref in (s.garment_ref, s.person_ref, s.tryon_ref):
            p = Path(ref) if os.path.isabs(ref) else base / ref
            if not p.exists():
                raise DataError(f"triplet {s.triplet_id}: image not found: {p}")


def read_annotations(path: str | os.PathLike) -> list[AnnotationRecord]:
    out = []
    for loc, rec in _lines(path):
        try:
            answer = rec["label"] if "label" in rec else rec["answer"]
            expected = rec.get("dummy_expected")
            out.append(AnnotationRecord(
                annotator_id=str(rec["annotator_id"]),
                questionnaire_id=str(rec["questionnaire_id"]),
                task_id=str(rec["task_id"]),
                triplet_id=str(rec["triplet_id"]),
                label=map_label(answer, loc),
                is_dummy=bool(rec.get("is_dummy", False)),
                dummy_expected=None if expected is None else map_label(expected, loc),
            ))
        except KeyError as e:
            raise ParseError(f"missing field {e.args[0]!r}", loc) from None
        except ParseError as e:
            if e.location is None:
                raise ParseError(str(e), loc) from None
            raise
    return out


def write_annotations(path: str | os.PathLike, records: Iterable[AnnotationRecord]) -> None:
    write_jsonl(path, [r.to_dict() for r in records])


def load_config(path: str | os.PathLike | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Model and training config from JSON; ``$TRYON_IQA_CONFIG`` is used when no path is given."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return ModelConfig(), TrainConfig()
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e.msg}") from None
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    try:
        return ModelConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {}))
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None


def write_corpus(out_dir: str | os.PathLike, samples: Iterable[TripletSample],
                 raw_images: dict, name: str = "manifest.jsonl") -> Path:
    """Write every referenced image as P6 and a manifest next to them."""
    out = Path(out_dir)
    for ref, img in raw_images.items():
        write_ppm(out / ref, img)
    path = out / name
    write_manifest(path, samples)
    return path
