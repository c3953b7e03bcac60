"""Command-line entry point: ``hoigen {gen-data,train,sample,eval,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradsuite, pipeline, synthdata
from .priors import FixedSubActions, ClauseSubActions
from .representation import ObjectGeometry


def _gen_data(args) -> int:
    frames = args.frames
    ds = synthdata.build_dataset(args.num, seed=args.seed, frames=frames, fps=args.fps)
    ds.save(args.out)
    print(f"wrote {len(ds.sequences)} sequences ({len(ds.train)} train / {len(ds.val)} val) to {args.out}")
    return 0


def _train(args) -> int:
    cfg = pipeline.RunConfig.load(args.config)
    if not cfg.data:
        raise ValueError("config has no 'data' path")
    if args.steps is not None:
        cfg.steps = args.steps
    trainer = pipeline.Trainer(cfg, args.out)
    if trainer.step:
        print(f"resuming from step {trainer.step}")
    recs = trainer.train()
    if recs:
        print(f"step {recs[-1]['step']}: total loss {recs[-1]['total']:.4f}")
    print(f"checkpoint: {trainer.checkpoint_dir}")
    return 0


def _sample(args) -> int:
    geoms = []
    for g in args.geom:
        path = Path(g)
        if not path.exists():
            raise FileNotFoundError(f"geometry file not found: {path}")
        geoms.append(ObjectGeometry.from_json(json.loads(path.read_text())))
    subs = args.sub_action or None
    if subs is None and args.sub_actions_file:
        table = json.loads(Path(args.sub_actions_file).read_text())
        subs = FixedSubActions(table, ClauseSubActions()).sub_actions(args.text)
    rec = pipeline.sample(args.ckpt, args.text, geoms, seed=args.seed, steps=args.steps,
                          guidance_scale=args.guidance_scale, sub_actions=subs)
    if args.out:
        rec.save(args.out)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(rec.dumps() + "\n")
    return 0


def _eval(args) -> int:
    report = pipeline.evaluate(args.ckpt, args.data, split=args.split, seed=args.seed, steps=args.steps,
                               guidance_scale=args.guidance_scale, csv_path=args.csv,
                               embedding_file=args.embeddings)
    text = json.dumps(report.to_json(), indent=1)
    Path(args.report).write_text(text + "\n")
    print(text)
    return 0


def _gradcheck(args) -> int:
    reports = gradsuite.run(args.module)
    ok = True
    for name, rep in reports.items():
        print(f"{name:26s} {rep}")
        ok &= rep.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hoigen", description="Text-driven human-object interaction generation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a deterministic synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=60)
    g.add_argument("--fps", type=float, default=30.0)
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train (or resume) all three stages")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None, help="override the configured step count")
    t.set_defaults(func=_train)

    s = sub.add_parser("sample", help="generate one sequence from a prompt")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--geom", nargs="+", required=True, help="object geometry JSON files")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=None, help="sampling steps for every stage")
    s.add_argument("--guidance-scale", type=float, default=None)
    s.add_argument("--sub-action", action="append", help="explicit sub-action (repeatable)")
    s.add_argument("--sub-actions-file", help="JSON map prompt -> sub-actions")
    s.add_argument("--out", help="output JSON path (default: stdout)")
    s.set_defaults(func=_sample)

    e = sub.add_parser("eval", help="sample the validation split and report metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int, default=None)
    e.add_argument("--guidance-scale", type=float, default=None)
    e.add_argument("--csv", help="optional per-sequence CSV")
    e.add_argument("--embeddings", help="JSON file with a 'real' feature matrix for the Fréchet distance")
    e.set_defaults(func=_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--module", default=None, help=f"one of {sorted(gradsuite.GROUPS)} or a single check name")
    c.set_defaults(func=_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # every failure maps to a nonzero exit
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
