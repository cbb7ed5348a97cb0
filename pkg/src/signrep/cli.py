"""signrep command line: generate, pretrain, extract, retrieve, classdist, finetune, report.

Every command works inside one run directory (``--out``) and writes the
resolved configuration it ran with next to its outputs.
"""

from __future__ import annotations

import os
import sys


def _cap_threads() -> int | None:
    raw = os.environ.get("SIGNREP_THREADS")
    if raw is None:
        return None
    if not raw.isdigit() or int(raw) < 1:
        raise SystemExit(f"signrep: error: SIGNREP_THREADS must be a positive integer, got {raw!r}")
    # must happen before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, raw)
    return int(raw)


THREADS = _cap_threads() if "numpy" not in sys.modules else None

import argparse  # noqa: E402
import csv  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import synth, trainer  # noqa: E402
from .config import ConfigError, RunConfig, parse_bool  # noqa: E402
from .model import CheckpointError, load_model  # noqa: E402
from .pose_io import PoseFormatError  # noqa: E402
from .retrieval import (  # noqa: E402
    ClassDistribution,
    FeatureStoreError,
    RetrievalIndex,
    class_similarity_matrix,
    read_features,
    retrieval_metrics,
    write_features,
)

log = logging.getLogger("signrep")

MANIFEST = "data/manifest.json"
CHECKPOINT = "checkpoint.srck"
TRAIN_LOG = "train_log.csv"
METRIC_COLUMNS = ("variant", "queries", "dcg", "mrr", "rec1", "rec5")


class CliError(Exception):
    """A validation failure reported to the user with exit status 1."""


# -- helpers -------------------------------------------------------------------------

def feature_path(out: Path, split: str, weighted: bool) -> Path:
    return out / f"features_{split}_{'weighted' if weighted else 'avg'}.srft"


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise CliError(f"missing {what}: {path} (run the earlier command first)")
    return path


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _load_manifest(out: Path) -> synth.Manifest:
    return synth.Manifest.load(_require(out / MANIFEST, "dataset manifest"))


def _split_arrays(out: Path, manifest: synth.Manifest, split: str):
    entries = manifest.split(split)
    streams, videos = zip(*(synth.load_entry(out / "data", e) for e in entries))
    return list(videos), list(streams), np.array([e.class_id for e in entries]), np.array([e.video_id for e in entries])


def _record_config(out: Path, command: str, cfg: RunConfig) -> None:
    text = cfg.dumps()
    for line in text.splitlines():
        log.info("config %s", line)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config_{command}.txt").write_text(text)


# -- commands ------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out: Path, args) -> None:
    manifest = synth.make_dataset(cfg.classes, cfg.samples_per_class, cfg.seed, cfg.length, cfg.height,
                                  cfg.width, out_dir=out / "data")
    log.info("wrote %d videos (%d train, %d test) to %s", len(manifest.entries), len(manifest.split("train")),
             len(manifest.split("test")), out / "data")


def cmd_pretrain(cfg: RunConfig, out: Path, args) -> None:
    manifest = _load_manifest(out)
    videos, streams, labels, _ = _split_arrays(out, manifest, "train")
    data = trainer.PretrainData.build(videos, streams, labels, frames=cfg.encoder().frames)
    res = trainer.pretrain(data, cfg.pretrain(), log_path=out / TRAIN_LOG, checkpoint_path=out / CHECKPOINT)
    last = res.records[-1]
    log.info("finished %d steps: recon %.4f total %.4f; kept step %d (selection dcg %.4f)",
             len(res.records), last["recon"], last["total"], res.best_step, res.best_dcg)


def cmd_extract(cfg: RunConfig, out: Path, args) -> None:
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT
    model, _, _ = load_model(_require(ckpt, "checkpoint"), expect=cfg.encoder())
    manifest = _load_manifest(out)
    for split in ("train", "test"):
        videos, _, labels, ids = _split_arrays(out, manifest, split)
        weighted, average = trainer.extract_features(model, videos, cfg.stride)
        write_features(feature_path(out, split, True), weighted, labels, ids)
        write_features(feature_path(out, split, False), average, labels, ids)
        log.info("extracted %d %s videos at stride %d", len(videos), split, cfg.stride)


def cmd_retrieve(cfg: RunConfig, out: Path, args) -> None:
    variant = "weighted" if cfg.weighted else "avg"
    db, db_labels, db_ids = read_features(_require(feature_path(out, "train", cfg.weighted), "feature store"))
    q, q_labels, q_ids = read_features(_require(feature_path(out, "test", cfg.weighted), "feature store"))
    index = RetrievalIndex.build(db, db_labels)
    ranks, dump = [], []
    for z, label, qid in zip(q, q_labels, q_ids):
        ranks.append(index.class_rank(z, int(label)))
        for rank, (row, hit_label, score) in enumerate(index.query(z, k=min(cfg.top_k, len(db))), 1):
            dump.append((int(qid), int(label), rank, int(db_ids[row]), int(hit_label), _cell(score)))
    m = retrieval_metrics(ranks)
    _write_csv(out / f"retrieval_{variant}.csv", METRIC_COLUMNS,
               [(variant, len(ranks), *(_cell(m[k]) for k in METRIC_COLUMNS[2:]))])
    _write_csv(out / f"topk_{variant}.csv", ("query_id", "query_label", "rank", "match_id", "match_label", "score"), dump)
    log.info("%s retrieval over %d queries: dcg %.4f mrr %.4f rec@1 %.4f rec@5 %.4f",
             variant, len(ranks), m["dcg"], m["mrr"], m["rec1"], m["rec5"])


def cmd_classdist(cfg: RunConfig, out: Path, args) -> None:
    feats, labels, _ = read_features(_require(feature_path(out, "train", cfg.weighted), "feature store"))
    sim = class_similarity_matrix(feats, labels)
    dist = ClassDistribution.from_similarity(sim, cfg.tau_grid())
    dist.save(out / "phi.csv", out / "tau.csv")
    log.info("class distribution over %d classes, tau range %.3f..%.3f", len(dist.taus), dist.taus.min(), dist.taus.max())


def cmd_finetune(cfg: RunConfig, out: Path, args) -> None:
    xtr, ytr, _ = read_features(_require(feature_path(out, "train", False), "feature store"))
    xte, yte, _ = read_features(_require(feature_path(out, "test", False), "feature store"))
    phi = None
    if cfg.kappa > 0:
        phi = ClassDistribution.load(_require(out / "phi.csv", "class distribution"), _require(out / "tau.csv", "temperatures"))
    _, report = trainer.finetune_recognition(xtr, ytr, xte, yte, phi, cfg.kappa, steps=cfg.probe_steps,
                                             lr=cfg.probe_lr, seed=cfg.seed)
    _write_csv(out / "recognition.csv", ("kappa", "top1", "top5", "final_loss"),
               [(_cell(cfg.kappa), _cell(report.top1), _cell(report.top5), _cell(report.final_loss))])
    log.info("probe with kappa %.3f: top-1 %.4f top-5 %.4f", cfg.kappa, report.top1, report.top5)


def cmd_report(cfg: RunConfig, out: Path, args) -> None:
    with open(_require(out / TRAIN_LOG, "training log")) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError(f"{out / TRAIN_LOG} has no steps")
    recon = np.array([float(r["recon"]) for r in rows])
    total = np.array([float(r["total"]) for r in rows])
    window = 50
    smooth = np.convolve(recon, np.ones(window) / window, mode="full")[: len(recon)]
    smooth /= np.minimum(np.arange(1, len(recon) + 1), window) / window
    _write_csv(out / "loss_curve.csv", ("step", "recon", "total", "recon_smoothed"),
               [(r["step"], r["recon"], r["total"], _cell(s)) for r, s in zip(rows, smooth)])
    head, tail = recon[:10].mean(), recon[-window:].mean()
    lines = [
        f"steps: {len(rows)}",
        f"recon first-10 mean: {head:.6f}",
        f"recon last-{window} mean: {tail:.6f}",
        f"recon ratio: {tail / head:.4f}",
        f"total last: {total[-1]:.6f}",
    ]
    for variant in ("weighted", "avg"):
        path = out / f"retrieval_{variant}.csv"
        if path.is_file():
            with open(path) as fh:
                m = next(csv.DictReader(fh))
            lines.append(f"retrieval {variant}: " + " ".join(f"{k} {float(m[k]):.4f}" for k in METRIC_COLUMNS[2:]))
    if (out / "recognition.csv").is_file():
        with open(out / "recognition.csv") as fh:
            r = next(csv.DictReader(fh))
        lines.append(f"recognition (kappa {r['kappa']}): top1 {float(r['top1']):.4f} top5 {float(r['top5']):.4f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


COMMANDS = {
    "generate": (cmd_generate, "render the synthetic dataset into OUT/data"),
    "pretrain": (cmd_pretrain, "pretrain the encoder; writes the checkpoint and per-step log"),
    "extract": (cmd_extract, "write weighted and average video features for both splits"),
    "retrieve": (cmd_retrieve, "dictionary retrieval of test videos against the train split"),
    "classdist": (cmd_classdist, "class similarity, temperature search and class distribution"),
    "finetune": (cmd_finetune, "linear recognition probe with the class-distribution regulariser"),
    "report": (cmd_report, "summary text and loss-curve CSV for a run directory"),
}


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", metavar="DIR", default="run", help="run directory (default: run)")
    common.add_argument("--stride", type=int)
    common.add_argument("--weighted", metavar="BOOL", help="activity-weighted (true) or plain average (false)")
    common.add_argument("--kappa", type=float)
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="signrep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name == "extract":
            p.add_argument("--checkpoint", metavar="PATH", help="default: OUT/checkpoint.srck")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "stride", "kappa") if getattr(args, k) is not None}
    if args.weighted is not None:
        overrides["weighted"] = parse_bool(args.weighted)
    return cfg.replace(**overrides) if overrides else cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = resolve_config(args)
        cfg.pretrain()  # validates weights and encoder geometry up front
        out = Path(args.out)
        if THREADS is not None:
            log.info("SIGNREP_THREADS=%d", THREADS)
        _record_config(out, args.command, cfg)
        COMMANDS[args.command][0](cfg, out, args)
    except (CliError, ConfigError, CheckpointError, FeatureStoreError, PoseFormatError,
            synth.VideoFormatError) as exc:
        print(f"signrep {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"signrep {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
