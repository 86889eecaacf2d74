"""Command-line entry point: ``python3 -m tryon_iqa <command> ...``.

Exit status is 0 on success, 1 for usage and configuration errors, 2 for
data and format errors and 3 for numeric failures. Failures print one line
to stderr of the form ``error kind=<kind> code=<n> msg=<json string>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import manifest as mf
from . import selftest as st
from .checkpoint import load_checkpoint, save_checkpoint
from .curation import CurationConfig, curate, split_dataset
from .dataset import ImageStore, TripletSample, by_split
from .errors import DataError, IqaError, NumericError, UsageError
from .harness import cross_group, human_baseline, strong_model_holdout
from .metrics import benchmark_table, calibration_bins, calibration_instances, count_inversions, evaluate
from .model import IcaModel, ModelConfig, preprocess
from .ppm import read_ppm
from .synthetic import annotation_fixture, label_text, make_corpus
from .train import TrainConfig, evaluation_loss, predict, train

log = logging.getLogger("tryon_iqa")

FIXTURE = "annotations_fixture.jsonl"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _ratios(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if len(values) != 3 or any(v < 0 for v in values) or sum(values) <= 0:
        raise argparse.ArgumentTypeError("expected three non-negative ratios for train,val,test")
    return values


def _groups(text: str) -> dict[str, list[str]]:
    """``name=gen1,gen2;name2=gen3``"""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        name, sep, members = part.partition("=")
        if not sep or not name.strip() or not members.strip():
            raise argparse.ArgumentTypeError(f"bad group definition {part!r}; expected name=gen1,gen2")
        out[name.strip()] = [m.strip() for m in members.split(",") if m.strip()]
    if not out:
        raise argparse.ArgumentTypeError("no groups given")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides train.seed from the config")
    common.add_argument("--config", default=None,
                        help=f"JSON with optional 'model' and 'train' sections (default: ${mf.CONFIG_ENV})")
    common.add_argument("--json", action="store_true", help="emit line-delimited JSON records")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tryon-iqa", description="Relational try-on quality assessment.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name: str, help: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help, parents=[common])

    p = cmd("curate", "filter raw annotations and aggregate MOS")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--annotations", help="line-delimited annotation records")
    src.add_argument("--fixture", action="store_true", help="use the bundled three-questionnaire fixture")
    p.add_argument("--triplets", help="manifest of triplet metadata to attach scores to")
    p.add_argument("--out", help="curated manifest (or score table without --triplets)")
    p.add_argument("--report", help="write the curation report as JSON")

    p = cmd("split", "assign identity-disjoint train/val/test splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split-ratios", type=_ratios, default=(0.7, 0.1, 0.2))

    p = cmd("train", "train a model on the train/val splits of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch log (line-delimited JSON)")
    p.add_argument("--tau", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--epochs", type=int)

    p = cmd("score", "score triplets")
    p.add_argument("--checkpoint", help="omit to score with a freshly initialised model")
    p.add_argument("--manifest")
    p.add_argument("--garment")
    p.add_argument("--person")
    p.add_argument("--tryon")

    for name, help in (("eval", "metrics of a checkpoint on one split"),
                       ("calibrate", "pairwise calibration table"),
                       ("benchmark", "per-generator mean predicted score")):
        p = cmd(name, help)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", default="test", help="split to evaluate, or 'all'")
        p.add_argument("--tau", type=float)

    p = cmd("human-baseline", "split-half agreement of the annotators")
    p.add_argument("--annotations", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--repeats", type=int, default=10)

    p = cmd("generalize", "cross-group and held-out-generator experiments")
    p.add_argument("--manifest", required=True)
    p.add_argument("--groups", type=_groups, help="name=gen1,gen2;name2=gen3")
    p.add_argument("--held-out", help="comma-separated generators to exclude from training")
    p.add_argument("--tau", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--epochs", type=int)

    p = cmd("selftest", "run the gradient, topology and statistic oracle suites")
    p.add_argument("--only", action="append", choices=sorted(st.SUITES))

    p = cmd("synth", "write a planted synthetic corpus and annotation fixture")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--anchors", type=int, default=60)
    p.add_argument("--per-anchor", type=int, default=4)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=48)
    return parser


# ---------------------------------------------------------------- helpers

def _configs(args) -> tuple[ModelConfig, TrainConfig]:
    model_cfg, train_cfg = mf.load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for key in ("tau", "patience"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "epochs", None) is not None:
        overrides["max_epochs"] = args.epochs
    if overrides:
        try:
            train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), **overrides})
        except ValueError as e:
            raise UsageError(str(e)) from None
    return model_cfg, train_cfg


def _emit(args, records: Sequence[dict], text: str) -> None:
    if args.json:
        for r in records:
            print(json.dumps(r, sort_keys=True))
    else:
        print(text)


def _select(samples: list[TripletSample], split: str) -> list[TripletSample]:
    chosen = samples if split == "all" else by_split(samples, split)
    if not chosen:
        raise DataError(f"manifest has no samples in split {split!r}")
    return chosen


def _scored(samples: list[TripletSample]) -> None:
    missing = [s.triplet_id for s in samples if s.normalized_score is None]
    if missing:
        raise DataError(f"{len(missing)} triplets lack human scores, e.g. {missing[0]}")


def _load_model(args, expected: ModelConfig | None = None):
    ckpt = load_checkpoint(args.checkpoint, expected)
    return ckpt.model, ckpt.train_config or TrainConfig()


def _trainer(model_cfg: ModelConfig, train_cfg: TrainConfig, images: ImageStore):
    def fit(tr, va):
        model = IcaModel.init(model_cfg, seed=train_cfg.seed)
        train(model, tr, va, images, train_cfg)
        return lambda samples: predict(model, samples, images)
    return fit


def _manifest(path) -> list[TripletSample]:
    samples = mf.read_manifest(path)
    mf.check_images(path, samples)
    return samples


# ---------------------------------------------------------------- commands

def cmd_curate(args) -> None:
    if args.fixture:
        path = resources.files("tryon_iqa") / "data" / FIXTURE
        with resources.as_file(path) as p:
            records = mf.read_annotations(p)
    else:
        records = mf.read_annotations(args.annotations)
    result = curate(records, CurationConfig())
    report = result.report.to_dict()
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.out:
        if args.triplets:
            mf.write_manifest(args.out, result.apply(mf.read_manifest(args.triplets)))
        else:
            mf.write_jsonl(args.out, [{"triplet_id": t, "raw_score": s, "num_annotations": result.counts[t]}
                                      for t, s in result.scores.items()])
    lines = [f"questionnaires: {report['questionnaires']}  annotators: {report['annotators']}"]
    for name, ids in report["removed"].items():
        lines.append(f"removed by {name}: {len(ids)} {' '.join(ids)}".rstrip())
    lines.append(f"removed annotators: {' '.join(report['removed_annotators']) or '-'}")
    for qid, a in report["alpha_after"].items():
        lines.append(f"alpha {qid}: before {report['alpha_before'][qid]:.4f} after {a:.4f}")
    lines.append(f"discarded questionnaires: {' '.join(report['discarded_questionnaires']) or '-'}")
    lines.append(f"scored triplets: {len(result.scores)}  dropped: {len(report['dropped_triplets'])}")
    lines.append("alpha histogram (after, width 0.05): " +
                 " ".join(f"{lo:+.2f}:{c}" for lo, c in report["alpha_histogram_after"] if c))
    _emit(args, [report], "\n".join(lines))


def cmd_split(args) -> None:
    samples = mf.read_manifest(args.manifest)
    seed = 0 if args.seed is None else args.seed
    out = split_dataset(samples, args.split_ratios, seed=seed)
    mf.write_manifest(args.out, out)
    counts = {name: len(by_split(out, name)) for name in ("train", "val", "test")}
    _emit(args, [counts], " ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_train(args) -> None:
    model_cfg, train_cfg = _configs(args)
    samples = _manifest(args.manifest)
    tr, va = by_split(samples, "train"), by_split(samples, "val")
    _scored(tr + va)
    images = mf.image_store(args.manifest, model_cfg)
    model = IcaModel.init(model_cfg, seed=train_cfg.seed)
    log_file = open(args.log, "w", encoding="utf-8") if args.log else None

    def on_epoch(rec: dict) -> None:
        line = json.dumps(rec, sort_keys=True)
        if log_file:
            log_file.write(line + "\n")
            log_file.flush()
        if args.json:
            print(line)
        else:
            print(f"epoch {rec['epoch']:3d}  train {rec['train_loss']:.6f}  val {rec['val_loss']:.6f}")

    try:
        result = train(model, tr, va, images, train_cfg, on_epoch=on_epoch)
    finally:
        if log_file:
            log_file.close()
    save_checkpoint(args.out, result.model, train_cfg, result.optimizer)
    summary = {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss, "checkpoint": args.out}
    _emit(args, [summary], f"best epoch {result.best_epoch}  val {result.best_val_loss:.6f}  -> {args.out}")


def cmd_score(args) -> None:
    if args.checkpoint:
        model, _ = _load_model(args)
    else:
        model_cfg, train_cfg = _configs(args)
        model = IcaModel.init(model_cfg, seed=train_cfg.seed)
    cfg = model.config
    if args.manifest:
        samples = _manifest(args.manifest)
        scores = predict(model, samples, mf.image_store(args.manifest, cfg))
        ids = [s.triplet_id for s in samples]
    else:
        paths = (args.garment, args.person, args.tryon)
        if not all(paths):
            raise UsageError("score needs --manifest or all of --garment, --person and --tryon")
        imgs = [preprocess(read_ppm(p), cfg.image_height, cfg.image_width)[None] for p in paths]
        scores = model.score(*imgs)
        ids = [Path(args.tryon).stem]
    if not np.all(np.isfinite(scores)):
        raise NumericError("model produced a non-finite score")
    _emit(args, [{"triplet_id": t, "score": float(s)} for t, s in zip(ids, scores)],
          "\n".join(f"{t}\t{s:.6f}" for t, s in zip(ids, scores)))


def _evaluation_inputs(args):
    model, stored_train = _load_model(args)
    tau = args.tau if args.tau is not None else stored_train.tau
    samples = _select(_manifest(args.manifest), args.split)
    _scored(samples)
    images = mf.image_store(args.manifest, model.config)
    return model, stored_train, tau, samples, images


def cmd_eval(args) -> None:
    model, stored, tau, samples, images = _evaluation_inputs(args)
    pred = predict(model, samples, images)
    report = evaluate(pred, [s.score for s in samples], [s.anchor for s in samples],
                      [s.generator_model for s in samples], tau=tau)
    report.extra["loss"] = evaluation_loss(model, samples, images, tau, stored.reg_weight)
    _emit(args, report.records(split=args.split), report.text())


def cmd_calibrate(args) -> None:
    model, _, tau, samples, images = _evaluation_inputs(args)
    pred = predict(model, samples, images)
    hp, mp = calibration_instances(pred, [s.score for s in samples], [s.anchor for s in samples], tau)
    bins = calibration_bins(hp, mp)
    records = [{"lower": b.lower, "upper": b.upper, "center": b.center, "count": b.count,
                "mean": None if b.count == 0 else b.mean, "std": None if b.count == 0 else b.std}
               for b in bins]
    inversions = count_inversions(bins)
    lines = [f"instances: {len(hp)}  inversions: {inversions}"]
    lines += [f"[{b.lower:.2f}, {b.upper:.2f})  {b.mean:.4f} +- {b.std:.4f}  n={b.count}" for b in bins if b.count]
    _emit(args, records + [{"instances": len(hp), "inversions": inversions}], "\n".join(lines))


def cmd_benchmark(args) -> None:
    model, _, _, samples, images = _evaluation_inputs(args)
    table = benchmark_table(predict(model, samples, images), [s.generator_model for s in samples])
    _emit(args, [{"generator": g, "mean": m, "count": n} for g, m, n in table],
          "\n".join(f"{g:<24} {m:+.4f}  n={n}" for g, m, n in table))


def cmd_human_baseline(args) -> None:
    result = curate(mf.read_annotations(args.annotations), CurationConfig())
    ratings: dict[str, list[int]] = defaultdict(list)
    for r in result.records:
        if not r.is_dummy:
            ratings[r.triplet_id].append(r.label)
    samples = _select(mf.read_manifest(args.manifest), args.split)
    seed = 0 if args.seed is None else args.seed
    try:
        hb = human_baseline(ratings, samples, repeats=args.repeats, seed=seed)
    except ValueError as e:
        raise DataError(str(e)) from None
    records = [{"metric": k, "mean": hb.mean[k], "std": hb.std[k]} for k in hb.mean]
    records.append({"excluded_triplets": hb.excluded})
    lines = [f"{k:>10}: {hb.mean[k]:.4f} +- {hb.std[k]:.4f}" for k in hb.mean]
    lines.append(f"excluded triplets (single rating): {hb.excluded}")
    _emit(args, records, "\n".join(lines))


def cmd_generalize(args) -> None:
    if not args.groups and not args.held_out:
        raise UsageError("generalize needs --groups and/or --held-out")
    model_cfg, train_cfg = _configs(args)
    samples = _manifest(args.manifest)
    _scored(samples)
    images = mf.image_store(args.manifest, model_cfg)
    trainer = _trainer(model_cfg, train_cfg, images)
    records, lines = [], []
    if args.groups:
        for name, rep in cross_group(samples, args.groups, trainer).items():
            records.append({"group": name, "known": rep.known, "blocks": rep.blocks,
                            "categories": rep.categories, "relative_drop": rep.drops})
            lines.append(f"group {name} (known: {', '.join(rep.known)})")
            for block, m in rep.blocks.items():
                lines.append(f"  {block:<4} srcc {m['srcc']:.4f} plcc {m['plcc']:.4f} r2 {m['r2']:.4f}")
            for cond, d in rep.drops.items():
                lines.append(f"  drop {cond}: {100 * d:.2f}%")
    if args.held_out:
        held = [g.strip() for g in args.held_out.split(",") if g.strip()]
        rep = strong_model_holdout(samples, held, trainer)
        records.append({"held_out": rep.held_out, "table": rep.table, "held_out_top": rep.held_out_top})
        lines.append(f"held out {', '.join(rep.held_out)}: top-ranked={rep.held_out_top}")
        lines += [f"  {g:<24} {m:+.4f}  n={n}" for g, m, n in rep.table]
    _emit(args, records, "\n".join(lines))


def cmd_selftest(args) -> int:
    results = st.run_all(args.only)
    _emit(args, [{"check": r.name, "passed": r.passed, "value": r.value, "tolerance": r.tolerance,
                  "seconds": r.seconds} for r in results], "\n".join(r.line() for r in results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f"selftest failed: {', '.join(failed)}")
    return 0


def cmd_synth(args) -> None:
    seed = 0 if args.seed is None else args.seed
    corpus = make_corpus(n_anchors=args.anchors, per_anchor=args.per_anchor, height=args.height,
                         width=args.width, seed=seed)
    path = mf.write_corpus(args.out, corpus.samples, corpus.raw_images)
    records, _ = annotation_fixture(seed=seed)
    write_fixture(Path(args.out) / FIXTURE, records)
    _emit(args, [{"manifest": str(path), "triplets": len(corpus.samples)}],
          f"wrote {len(corpus.samples)} triplets to {path}")


def write_fixture(path, records) -> None:
    """Annotation records with the answer text as shown to annotators."""
    rows = []
    for r in records:
        d = r.to_dict()
        d["answer"] = label_text(d.pop("label"))
        if r.is_dummy:
            d["dummy_expected"] = label_text(r.dummy_expected)
        rows.append(d)
    mf.write_jsonl(path, rows)


COMMANDS = {
    "curate": cmd_curate, "split": cmd_split, "train": cmd_train, "score": cmd_score, "eval": cmd_eval,
    "human-baseline": cmd_human_baseline, "calibrate": cmd_calibrate, "benchmark": cmd_benchmark,
    "generalize": cmd_generalize, "selftest": cmd_selftest, "synth": cmd_synth,
}


def _diagnostic(kind: str, code: int, msg: str) -> str:
    return f"error kind={kind} code={code} msg={json.dumps(msg)}"


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
        return 0
    except IqaError as e:
        print(_diagnostic(e.kind, e.exit_code, str(e)), file=sys.stderr)
        return e.exit_code
    except FloatingPointError as e:
        print(_diagnostic("numeric", 3, str(e)), file=sys.stderr)
        return 3
    except OSError as e:
        print(_diagnostic("io", 2, f"{e.filename}: {e.strerror}" if e.filename else str(e)), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
