"""Command-line entry point: synth, train, eval, ablate, bench, distill."""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace

import numpy as np

from microdet.config import ConfigError, load_config
from microdet.data import dataset_hash, load_split, write_dataset
from microdet.evalbench import (bench_decode, emit_report, evaluate,
                                make_bench_predictions)
from microdet.train import Trainer, evaluate_model, load_model, predict_images


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    stats = write_dataset(cfg.data, args.out, seed=cfg.train.seed, force=args.force)
    counts = stats["counts"]
    _progress(f"wrote {sum(counts.values())} scenes to {args.out} "
              f"(train={counts['train']} val={counts['val']} test={counts['test']})")
    _progress(f"targets: {stats['targets']}, below 20px: {stats['pct_below_20px']:.1%}")
    _progress(f"conditions: {stats['conditions']}")
    print(dataset_hash(args.out))
    return 0


def _load_teacher(path):
    teacher = load_model(path)
    teacher.eval()
    return teacher


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_samples = load_split(args.data, "train")
    val_samples = load_split(args.data, "val")
    teacher = _load_teacher(args.teacher) if args.teacher else None
    trainer = Trainer(cfg, train_samples, val_samples, teacher=teacher)
    t0 = time.perf_counter()
    outcome = trainer.run(out_dir=args.out)
    dt = time.perf_counter() - t0
    last = outcome.history[-1]
    _progress(f"trained {cfg.train.epochs} epochs in {dt:.1f}s; "
              f"final total loss {last['total']:.4f}")
    if outcome.final_map50 is not None:
        _progress(f"val map50: {outcome.final_map50:.4f} (best {outcome.best_map50:.4f})")
    _progress(f"checkpoints and train_log.csv in {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = load_model(args.checkpoint)
    samples = load_split(args.data, args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} of {args.data} is empty")
    report = evaluate_model(model, samples, cfg, decode=args.decode)
    os.makedirs(args.out, exist_ok=True)
    emit_report(report, os.path.join(args.out, "report.csv"), "csv")
    emit_report(report, os.path.join(args.out, "pr_curve.svg"), "svg")
    _progress(f"map50={report.map50:.4f} map5095={report.map5095:.4f} "
              f"precision={report.precision:.4f} recall={report.recall:.4f}")
    _progress(f"reports in {args.out}")
    return 0


ABLATION_VARIANTS = (
    # (name, model overrides, train overrides)
    ("baseline-P3", dict(levels=("P3", "P4"), use_attention=False, use_dfl=True,
                         o2o_head=False),
     dict(decode="nms", muon=False, boost=False)),
    ("+P2", dict(levels=("P2", "P3", "P4"), use_attention=False, use_dfl=True,
                 o2o_head=False),
     dict(decode="nms", muon=False, boost=False)),
    ("+P2+attention", dict(levels=("P2", "P3", "P4"), use_attention=True,
                           use_dfl=True, o2o_head=False),
     dict(decode="nms", muon=False, boost=False)),
    ("final", dict(levels=("P2", "P3", "P4"), use_attention=True, use_dfl=False,
                   o2o_head=True),
     dict(decode="o2o", muon=True, boost=True)),
)


def run_ablation(cfg, data_dir, out_dir=None):
    """Train every variant on the same corpus; returns one row per variant."""
    from microdet.data import read_manifest
    train_samples = load_split(data_dir, "train")
    val_samples = load_split(data_dir, "val")
    data_digest = dataset_hash(data_dir)
    image_size = int(read_manifest(data_dir)["dataset"]["image_size"])
    rows = []
    for name, model_kw, train_kw in ABLATION_VARIANTS:
        vcfg = load_config(None)
        vcfg.model = replace(cfg.model, input_size=image_size, **model_kw)
        vcfg.data = cfg.data
        vcfg.loss = replace(cfg.loss, small_target_boost=train_kw["boost"])
        vcfg.optimizer = replace(cfg.optimizer, muon_enabled=train_kw["muon"])
        vcfg.train = replace(cfg.train, decode=train_kw["decode"])
        _progress(f"[ablate] training variant {name!r} "
                  f"({vcfg.train.epochs} epochs, {len(train_samples)} images)")
        t0 = time.perf_counter()
        trainer = Trainer(vcfg, train_samples, val_samples)
        trainer.run(out_dir=None)
        train_s = time.perf_counter() - t0
        report = evaluate_model(trainer.model, val_samples, vcfg)
        # decode latency of this variant's configured path
        images = np.stack([s.image_f32() for s in val_samples[:1]])
        from microdet import tensor as T
        from microdet.tensor import Tensor
        trainer.model.eval()
        with T.no_grad():
            preds = trainer.model(Tensor(images))
        branch = "o2o" if vcfg.train.decode == "o2o" else "o2m"
        bench = bench_decode(preds[branch], vcfg.train.conf_thresh,
                             vcfg.train.iou_thresh, reps=30)
        stage = "decode_nms_free" if vcfg.train.decode == "o2o" else "decode_with_nms"
        rows.append({
            "variant": name, "map50": report.map50, "map5095": report.map5095,
            "recall_lt16": report.recall_lt16,
            "decode_median_us": bench.stages[stage].median_us,
            "train_seconds": train_s, "dataset_hash": data_digest,
        })
        _progress(f"[ablate] {name}: map50={report.map50:.4f} "
                  f"recall_lt16={report.recall_lt16:.4f} ({train_s:.0f}s)")
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            write_ablation_csv(rows, os.path.join(out_dir, "ablation.csv"))
    return rows


def write_ablation_csv(rows, path) -> None:
    cols = ("variant", "map50", "map5095", "recall_lt16", "decode_median_us",
            "train_seconds", "dataset_hash")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(
                row["variant"] if c == "variant"
                else row["dataset_hash"] if c == "dataset_hash"
                else f"{row[c]:.6f}" for c in cols) + "\n")


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    rows = run_ablation(cfg, args.data, args.out)
    _progress(f"ablation table in {os.path.join(args.out, 'ablation.csv')}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    if args.checkpoint:
        model = load_model(args.checkpoint)
        model.eval()
        from microdet import tensor as T
        from microdet.tensor import Tensor
        rng = np.random.default_rng(cfg.train.seed)
        size = model.cfg.input_size
        image = Tensor(rng.random((1, 3, size, size)).astype(np.float32))

        def forward_fn():
            with T.no_grad():
                return model(image)

        with T.no_grad():
            preds = model(image)["o2o" if model.cfg.o2o_head else "o2m"]
        # raise enough cells above threshold to hit the requested count
        cells = min(args.boxes, preds.total_cells())
        flat = np.full(preds.total_cells(), -10.0, dtype=np.float32)
        hot = rng.choice(preds.total_cells(), size=cells, replace=False)
        flat[hot] = rng.uniform(1.0, 6.0, cells).astype(np.float32)
        off = 0
        for lv in preds.levels:
            g = size // preds.strides[lv]
            preds.cls[lv].data[0, 0] = flat[off:off + g * g].reshape(g, g)
            off += g * g
    else:
        preds = make_bench_predictions(n_hot=args.boxes, seed=cfg.train.seed)
        forward_fn = None
    report = bench_decode(preds, cfg.train.conf_thresh, cfg.train.iou_thresh,
                          reps=args.reps, forward_fn=forward_fn)
    emit_report(report, args.out, "csv")
    for name, st in report.stages.items():
        _progress(f"{name}: median {st.median_us:.1f}us p95 {st.p95_us:.1f}us")
    _progress(f"candidates above threshold: {report.candidate_count}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microdet",
        description="Desk-scale micro-target detector on synthetic ground-to-air scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI run configuration")

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.set_defaults(fn=cmd_synth)

    for name, need_teacher in (("train", False), ("distill", True)):
        p = sub.add_parser(name, help="train a detector"
                           + (" with a mandatory teacher" if need_teacher else ""))
        common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--teacher", required=need_teacher, default=None,
                       help="teacher checkpoint for distillation")
        p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--decode", default="o2o", choices=("o2o", "nms"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare the standard variants")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench", help="decode-latency benchmark")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--boxes", type=int, default=1000)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, FileExistsError, ValueError,
            KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
