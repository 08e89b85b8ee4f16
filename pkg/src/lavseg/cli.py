"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, gradcheck, render-overlays.
Exit codes: 0 success, 1 contract/usage error, 2 I/O error.
SLV_THREADS caps worker threads (the reference pipeline is sequential, so
it only bounds, never changes, any result).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from lavseg.autodiff import ShapeError
from lavseg.checkpoint import CheckpointError
from lavseg.config import ConfigError, RunConfig, load_config, resolve_config
from lavseg.data import (DatasetError, GenerationError, build_dataset,
                         load_manifest, load_sample, load_split, manifest_digest,
                         read_pgm, write_pgm)
from lavseg.metrics import evaluate
from lavseg.model import Model, load_model
from lavseg.overlays import render_sample_overlays
from lavseg.training import Trainer
from lavseg.verify import TOLERANCE, run_scope


def _worker_threads() -> int:
    raw = os.environ.get("SLV_THREADS", "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SLV_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError("SLV_THREADS must be >= 1")
    return n


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    manifest = build_dataset(args.seed, cfg.data, args.out,
                             n_train=args.train, n_seen=args.seen,
                             n_unseen=args.unseen, n_null=args.null)
    print(f"wrote {len(manifest['samples'])} samples to {args.out}")
    print(f"manifest digest: {manifest_digest(args.out)}")
    return 0


def cmd_train(args) -> int:
    _worker_threads()
    cfg = load_config(args.config)
    manifest = load_manifest(args.data)
    # the dataset's own geometry always wins over the config's data section
    doc = cfg.to_dict()
    doc["data"] = manifest["config"]
    cfg = resolve_config(doc)
    samples = load_split(manifest, "train")
    model = Model(cfg)
    trainer = Trainer(model, samples, cfg)
    if args.resume:
        resumed, extra = load_model(args.resume)
        model.load_state(resumed.state_tensors())
        trainer.load_state(extra)
    remaining = cfg.train.total_steps - trainer.step_count
    trainer.train(remaining, log_every=args.log_every)
    trainer.save(args.out)
    trainer.write_log(str(args.out) + ".loss.csv")
    cfg.echo(str(args.out) + ".config.json")
    print(f"trained {remaining} steps; final loss "
          f"{trainer.loss_log[-1][2]:.5f}" if trainer.loss_log else "no steps run")
    print(f"checkpoint: {args.out}")
    return 0


def _predictor(model: Model):
    def predict(sample):
        return [p.binary_mask() for p in model.predict_sample(sample)]
    return predict


def _dump_predictions(model: Model, samples, out_dir: Path) -> None:
    records = []
    for sample in samples:
        rel = Path(sample.split) / sample.sample_id
        sdir = out_dir / rel
        sdir.mkdir(parents=True, exist_ok=True)
        preds = model.predict_sample(sample)
        for t, p in enumerate(preds):
            write_pgm(sdir / f"pred_{t:03d}.pgm", p.binary_mask())
        records.append({"id": sample.sample_id, "split": sample.split,
                        "dir": str(rel), "num_frames": sample.num_frames})
    (out_dir / "predictions.json").write_text(
        json.dumps({"samples": records}, indent=1, sort_keys=True),
        encoding="utf-8")


def cmd_eval(args) -> int:
    _worker_threads()
    model, _ = load_model(args.ckpt)
    manifest = load_manifest(args.data)
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    alias = {"seen": "seen-test", "unseen": "unseen-test",
             "null": "null-test", "train": "train"}
    splits = [alias.get(s, s) for s in splits]
    samples = [load_sample(manifest, rec["id"]) for rec in manifest["samples"]
               if rec["split"] in splits]
    report = evaluate(_predictor(model), samples, splits=splits)
    report.write_csv(args.report)
    if args.json:
        report.write_json(args.json)
    if args.dump_masks:
        _dump_predictions(model, samples, Path(args.dump_masks))
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    for split, vals in report.summary().items():
        cells = ", ".join(f"{k.upper()}={v:.4f}" for k, v in vals.items()
                          if v is not None)
        if cells:
            print(f"{split}: {cells}")
    return 0


_ABLATE_AXES = {
    "layers": ("fusion", "layers", int),
    "n_seg": ("fusion", "n_seg", int),
    "strategy": ("fusion", "strategy", str),
    "freeze": ("seg", None, str),  # values: none | decoder | decoder+prompt
}


def _apply_axis(doc: dict, axis: str, value: str) -> dict:
    section, key, typ = _ABLATE_AXES[axis]
    doc = json.loads(json.dumps(doc))
    if axis == "freeze":
        flags = {"none": (False, False), "decoder": (True, False),
                 "decoder+prompt": (True, True)}
        if value not in flags:
            raise ConfigError(f"freeze axis value must be one of {sorted(flags)}")
        dec, prm = flags[value]
        doc.setdefault("seg", {})["train_decoder"] = dec
        doc["seg"]["train_prompt"] = prm
    else:
        doc.setdefault(section, {})[key] = typ(value)
    return doc


def cmd_ablate(args) -> int:
    if args.axis not in _ABLATE_AXES:
        raise ConfigError(f"unknown ablation axis {args.axis!r}; "
                          f"choose from {sorted(_ABLATE_AXES)}")
    base_doc = {}
    if args.config:
        base_doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    manifest = load_manifest(args.data)
    train_samples = load_split(manifest, "train")
    eval_samples = [load_sample(manifest, r["id"]) for r in manifest["samples"]
                    if r["split"] in ("seen-test", "unseen-test", "null-test")]
    rows = []
    failures = 0
    for value in args.values.split(","):
        value = value.strip()
        try:
            cfg = resolve_config(_apply_axis(base_doc, args.axis, value))
            model = Model(cfg)
            trainer = Trainer(model, train_samples, cfg)
            trainer.train()
            report = evaluate(_predictor(model), eval_samples)
            s = report.summary()
            rows.append([args.axis, value] + [
                "" if s[k][m] is None else f"{s[k][m]:.6f}"
                for k in ("seen-test", "unseen-test", "mix") for m in ("j", "f", "jf")
            ] + ["" if s["null-test"]["s"] is None else f"{s['null-test']['s']:.6f}"])
        except (ConfigError, ValueError, GenerationError) as e:
            print(f"run {args.axis}={value} failed: {e}", file=sys.stderr)
            failures += 1
    with open(args.out, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["axis", "value",
                     "seen_J", "seen_F", "seen_JF",
                     "unseen_J", "unseen_F", "unseen_JF",
                     "mix_J", "mix_F", "mix_JF", "null_S"])
        wr.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 1 if failures else 0


def cmd_gradcheck(args) -> int:
    report, passed = run_scope(args.scope)
    for name, err in sorted(report.items()):
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:24s} max rel err {err:.3e}  {status}")
    print("gradcheck:", "PASS" if passed else "FAIL")
    return 0 if passed else 1


def cmd_render_overlays(args) -> int:
    manifest = load_manifest(args.data)
    pred_doc = json.loads((Path(args.predictions) / "predictions.json")
                          .read_text(encoding="utf-8"))
    out_root = Path(args.out)
    count = 0
    for rec in pred_doc["samples"]:
        sample = load_sample(manifest, rec["id"])
        pdir = Path(args.predictions) / rec["dir"]
        masks = []
        for t in range(rec["num_frames"]):
            masks.append(read_pgm(pdir / f"pred_{t:03d}.pgm"))
        if len(masks) != sample.num_frames:
            raise DatasetError(f"{rec['id']}: {len(masks)} predictions for "
                               f"{sample.num_frames} frames")
        render_sample_overlays(sample, masks, out_root / rec["dir"])
        count += 1
    print(f"rendered overlays for {count} samples under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lavseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, required=True)
    g.add_argument("--seen", type=int, required=True)
    g.add_argument("--unseen", type=int, required=True)
    g.add_argument("--null", type=int, required=True)
    g.add_argument("--config", default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--splits", default="seen,unseen,null")
    e.add_argument("--report", required=True)
    e.add_argument("--json", default=None)
    e.add_argument("--dump-masks", default=None)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one config axis")
    a.add_argument("--axis", required=True)
    a.add_argument("--values", required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference verification")
    c.add_argument("--scope", default="all",
                   choices=["ops", "fusion", "decoder", "end2end", "all"])
    c.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("render-overlays", help="render prediction overlays")
    r.add_argument("--data", required=True)
    r.add_argument("--predictions", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render_overlays)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (ConfigError, GenerationError, ShapeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
