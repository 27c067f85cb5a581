"""Command-line entry points: synth, build-graph, train, infer, eval, ablate, sweep."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import dump_kv, load_kv, parse_kv
from .data import (
    load_dataset,
    read_predictions,
    read_tracks,
    save_dataset,
    write_predictions,
)
from .graph import VARIANTS, TIME_EPS, build_chunk_graphs, order_and_chunk
from .metrics import PredictionSet, run_ablation, run_sweep, write_csv
from .model import load_checkpoint, param_count, save_checkpoint
from .synth import SyntheticSpec, generate_synthetic
from .tensor_core import ValidationError
from .train import TrainConfig, predict, train

log = logging.getLogger("spell")


class CLIError(Exception):
    pass


def _train_config(args) -> TrainConfig:
    cfg = load_kv(args.config, TrainConfig) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _load_spec(path) -> SyntheticSpec:
    text = Path(path).read_text(encoding="utf-8")
    first = parse_kv(text, SyntheticSpec, str(path))
    base = SyntheticSpec.contextual() if first.mode == "contextual" else SyntheticSpec()
    return parse_kv(text, SyntheticSpec, str(path), base=base)


def _eval_split(args):
    if bool(args.eval_tracks) != bool(args.eval_features):
        raise CLIError("--eval-tracks and --eval-features must be given together")
    if args.eval_tracks:
        return load_dataset(args.eval_tracks, args.eval_features)
    return None


# -- subcommands ------------------------------------------------------------------

def cmd_synth(args):
    spec = _load_spec(args.spec) if args.spec else SyntheticSpec()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(spec, args.seed)
    save_dataset(ds, out / "tracks.csv", out / "features.bin")
    (out / "spec.txt").write_text(dump_kv(spec), encoding="utf-8")
    print(f"wrote {len(ds)} boxes in {len(ds.video_ids())} videos to {out}")


def cmd_build_graph(args):
    boxes = read_tracks(args.tracks)
    by_video: dict[str, list] = {}
    for b in boxes:
        by_video.setdefault(b.video_id, []).append(b)
    chunks_out = []
    totals = {v: 0 for v in VARIANTS}
    totals.update(nodes=0, self_loops=0, same_frame=0, cross_time=0)
    for vid in sorted(by_video):
        for i, chunk in enumerate(order_and_chunk(by_video[vid], args.n)):
            build_chunk_graphs(chunk, args.tau)
            und = chunk.edge_sets["undirected"].edges
            t = chunk.times
            loops = int(np.sum(und[:, 0] == und[:, 1]))
            same = np.abs(t[und[:, 0]] - t[und[:, 1]]) <= TIME_EPS
            rec = {"video_id": vid, "chunk": i, "nodes": chunk.node_count,
                   **{v: len(chunk.edge_sets[v]) for v in VARIANTS},
                   "self_loops": loops,
                   "same_frame": int(np.sum(same)) - loops,
                   "cross_time": int(np.sum(~same))}
            chunks_out.append(rec)
            for k in totals:
                totals[k] += rec[k]
    stats = {"n": args.n, "tau": args.tau, "chunks": len(chunks_out), "totals": totals,
             "per_chunk": chunks_out}
    Path(args.out).write_text(json.dumps(stats, indent=1) + "\n", encoding="utf-8")
    print(" ".join(f"{k}={v}" for k, v in totals.items()) + f" chunks={len(chunks_out)}")


def cmd_train(args):
    cfg = _train_config(args)
    ds = load_dataset(args.tracks, args.features)
    model, hist = train(ds, cfg)
    save_checkpoint(model.params, args.out)
    if args.history:
        write_csv([{"epoch": i, "lr": lr, "loss": loss}
                   for i, (lr, loss) in enumerate(zip(hist.lrs, hist.losses))], args.history)
    final = hist.losses[-1] if hist.losses else float("nan")
    print(f"trained {cfg.epochs} epochs, final loss {final:.6f}, "
          f"{model.params.count()} parameters -> {args.out}")


def cmd_infer(args):
    if args.config and (args.tau is not None or args.n is not None):
        raise CLIError("--tau/--n conflict with --config; set them in the config file")
    cfg = _train_config(args)
    overrides = {k: getattr(args, k) for k in ("tau", "n") if getattr(args, k) is not None}
    cfg = dataclasses.replace(cfg, **overrides)
    ds = load_dataset(args.tracks, args.features)
    model = load_checkpoint(args.ckpt)
    scores = predict(model, ds, cfg)
    write_predictions([b.key for b in ds.boxes], scores, args.out)
    print(f"wrote {len(scores)} predictions to {args.out}")


def cmd_eval(args):
    preds = read_predictions(args.predictions)
    boxes = read_tracks(args.tracks)
    keys, scores, labels = [], [], []
    for b in boxes:
        if b.label is None:
            raise CLIError(f"{args.tracks}: box {b.key} has no label")
        if b.key not in preds:
            raise CLIError(f"{args.predictions}: no prediction for key {b.key}")
        keys.append(b.key)
        scores.append(preds[b.key])
        labels.append(b.label)
    ps = PredictionSet(keys, np.array(scores), np.array(labels))
    ap = ps.ap()
    per_video = ps.per_video()
    print(f"AP {ap:.6f}")
    if args.out:
        write_csv([{"video_id": "ALL", "ap": ap}] +
                  [{"video_id": v, "ap": a} for v, a in per_video.items()], args.out)


def cmd_ablate(args):
    cfg = _train_config(args)
    ds = load_dataset(args.tracks, args.features)
    report = run_ablation(ds, cfg, _eval_split(args))
    records = report.to_records()
    write_csv(records, args.out)
    for r in records:
        print(f"{r['row']}: AP {r['ap']:.4f}")


def cmd_sweep(args):
    cfg = _train_config(args)
    ds = load_dataset(args.tracks, args.features)
    points = run_sweep(ds, cfg, args.axis, args.values, _eval_split(args))
    records = [{args.axis: p.value, "ap": p.ap, "edge_count": p.edge_count,
                "param_count": p.param_count} for p in points]
    write_csv(records, args.out)
    for r in records:
        print(" ".join(f"{k}={v}" for k, v in r.items()))


def cmd_params(args):
    cfg = _train_config(args)
    print(param_count(cfg.model_config()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spell", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic track file + feature store")
    s.add_argument("--spec")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-graph", help="chunk tracks and dump edge statistics")
    s.add_argument("--tracks", required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--tau", type=float, default=0.9)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("train", help="train the model and write a checkpoint")
    s.add_argument("--tracks", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--history", help="optional per-epoch loss CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="score every box with a checkpoint")
    s.add_argument("--tracks", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--tau", type=float)
    s.add_argument("--n", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="average precision of a prediction CSV")
    s.add_argument("--predictions", required=True)
    s.add_argument("--tracks", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    for name, func in (("ablate", cmd_ablate), ("sweep", cmd_sweep)):
        s = sub.add_parser(name, help=f"run the {name} harness and write a CSV report")
        s.add_argument("--tracks", required=True)
        s.add_argument("--features", required=True)
        s.add_argument("--eval-tracks")
        s.add_argument("--eval-features")
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True)
        if name == "sweep":
            s.add_argument("--axis", required=True, choices=["tau", "n", "filter_dim"])
            s.add_argument("--values", required=True, nargs="+", type=float)
        s.set_defaults(func=func)

    s = sub.add_parser("params", help="print the trainable parameter count")
    s.add_argument("--config")
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, ValidationError, OSError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"spell {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
