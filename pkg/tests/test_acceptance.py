"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected by ``conftest.py`` and repeated in the terminal
summary so a plain ``pytest`` run shows all eleven verdicts together.
"""

import contextlib
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import (
    brute_force_ap,
    dense_edges,
    naive_edge_conv,
    naive_maxpool,
    naive_sage_conv,
    random_graph,
    rel_error,
)
from spell.cli import main
from spell.graph import VARIANTS, EdgeSet, build_chunk_graphs, build_edges, order_and_chunk
from spell.metrics import average_precision, run_ablation
from spell.model import (
    FILTER_DIMS,
    Adjacency,
    ModelConfig,
    SpellModel,
    SpellParams,
    edge_conv_forward,
    maxpool_forward,
    param_count,
    sage_conv_forward,
)
from spell.synth import SyntheticSpec, generate_synthetic
from spell.tensor_core import bce_loss
from spell.train import TrainConfig, predict
from test_graph import random_boxes
from test_model import random_batch, random_chunk

REFERENCE_PARAMS = 111_808

# Short training recipe for the harness criteria (see the decisions ledger):
# the 120-epoch, lr 2e-4 schedule is sized for AVA, not a 20-video synthetic set.
DESK = dict(batch_size=4, lr_max=1e-3, schedule="single")
HARNESS_EPOCHS = 15
SEPARABLE_EPOCHS = 25
SEEDS = (0, 1, 2)

# 10k -> 100k nodes must scale no worse than linearly; timing noise on a shared
# core is absorbed by this factor on top of the 10x node ratio
SCALING_SLACK = 1.25


@contextlib.contextmanager
def criterion(number, title):
    """Record a PASS/FAIL line for one criterion; ``detail`` collects measurements."""
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        line = f"[FAIL] {number:2d}. {title}: {detail.get('msg', '')} ({type(exc).__name__}: {exc})"
        ACCEPTANCE_LINES[number] = line.replace("\n", " ")
        print(ACCEPTANCE_LINES[number])
        raise
    ACCEPTANCE_LINES[number] = f"[PASS] {number:2d}. {title}: {detail.get('msg', '')}"
    print(ACCEPTANCE_LINES[number])


def test_01_edge_construction_oracle():
    with criterion(1, "edge construction vs all-pairs oracle") as d:
        rng = np.random.default_rng(101)
        built = 0.0
        mismatches = 0
        for _ in range(200):
            n_boxes = int(rng.integers(1, 301))
            chunk = order_and_chunk(random_boxes(rng, n_boxes, n_ids=6, span=10.0), 10_000)[0]
            times = [b.time for b in chunk.nodes]
            ids = [b.entity_id for b in chunk.nodes]
            for v in VARIANTS:
                t0 = time.perf_counter()
                es = build_edges(chunk, 0.9, v)
                built += time.perf_counter() - t0
                mismatches += es.pairs() != dense_edges(times, ids, 0.9, v)
        d["msg"] = f"200 sets x 3 variants, {mismatches} mismatches, build time {built:.2f}s"
        assert mismatches == 0 and built < 10


def test_02_full_model_gradient_check():
    with criterion(2, "full-model gradient check (float64, 30 nodes)") as d:
        rng = np.random.default_rng(202)
        t0 = time.perf_counter()
        cfg = ModelConfig()
        chunk = random_chunk(rng, 30)
        model = SpellModel.create(cfg, seed=7, dtype=np.float64)
        batch = random_batch(rng, 30, cfg)
        edges = chunk.edge_sets
        y = batch.labels.astype(np.float64)
        # the coarse step keeps round-off low (zero-gradient biases before BN);
        # the fine step resolves entries whose +-h stencil straddles a ReLU kink
        coarse, fine = 1e-5, 1e-6

        def loss():
            return bce_loss(model.forward(batch, edges, "train"), y)[0]

        def central(flat, i, h, u=None):
            """Central difference along entry ``i``, or along direction ``u``."""
            base = flat.copy()
            step = h * u if u is not None else h * (np.arange(flat.size) == i)
            flat[:] = base + step
            fp = loss()
            flat[:] = base - step
            fm = loss()
            flat[:] = base
            return (fp - fm) / (2 * h)

        model.params.zero_grad()
        _, g = bce_loss(model.forward(batch, edges, "train"), y)
        model.backward(g)
        # biases feeding train-mode BN have an exactly-zero gradient; their relative
        # error is measured against a floor tied to the model's gradient scale
        floor = 1e-3 * max(float(np.max(np.abs(p.grad))) for p in model.params.parameters())
        worst, worst_name, checked = 0.0, "", 0
        for p in model.params.parameters():
            flat = p.value.reshape(-1)
            analytic = p.grad.reshape(-1).copy()
            if flat.size <= 5000:
                idx = np.arange(flat.size)
            else:
                # the five input-side weight matrices: largest-gradient entries plus a random sample
                idx = np.unique(np.concatenate([np.argsort(-np.abs(analytic))[:128],
                                                rng.choice(flat.size, 128, replace=False)]))
            a = analytic[idx]
            numeric = np.array([central(flat, i, coarse) for i in idx])
            # entries that disagree at the coarse step are re-measured at the fine one
            scale = max(np.max(np.abs(a)), np.max(np.abs(numeric)), floor)
            for j in np.flatnonzero(np.abs(a - numeric) > 1e-6 * scale):
                retry = central(flat, idx[j], fine)
                if abs(a[j] - retry) < abs(a[j] - numeric[j]):
                    numeric[j] = retry
            err = rel_error(a, numeric, floor=floor)
            if flat.size > 5000:
                # a unit-norm random direction probes every entry of the tensor at once
                for _ in range(3):
                    u = rng.standard_normal(flat.size)
                    u /= np.linalg.norm(u)
                    err = max(err, min(rel_error(analytic @ u, central(flat, None, h, u), floor=floor)
                                       for h in (coarse, fine)))
            checked += len(idx)
            if err > worst:
                worst, worst_name = err, p.name
        elapsed = time.perf_counter() - t0
        d["msg"] = (f"{len(model.params.tensors)} tensors, {checked} entries, max rel error "
                    f"{worst:.2e} ({worst_name}), {elapsed:.0f}s")
        assert worst < 1e-4 and elapsed < 120


def test_03_aggregation_oracles():
    with criterion(3, "EDGE-CONV / SAGE-CONV / maxpool vs per-node loops (float32)") as d:
        rng = np.random.default_rng(303)
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 51))
            edges = random_graph(rng, n, p=float(rng.uniform(0.02, 0.3)))
            e = np.array(edges, dtype=np.int64).reshape(-1, 2)
            adj = Adjacency(EdgeSet(e, "undirected", n))
            x = rng.standard_normal((n, 16)).astype(np.float32)
            # weights drawn from the model's own initialiser
            p = SpellParams(np.float32)
            p.add_linear("e.g1", 32, 16, rng)
            p.add_linear("e.g2", 16, 16, rng)
            p.add_linear("e.s", 16, 16, rng)
            p.add_linear("e.h", 16, 1, rng)
            for k in ("e.g1.b", "e.g2.b", "e.s.b", "e.h.b"):
                p[k].value[...] = rng.uniform(-0.25, 0.25, p[k].shape)
            t = {k: v.value.astype(np.float64) for k, v in p.tensors.items()}
            x64 = x.astype(np.float64)
            pairs = [
                (edge_conv_forward(x, adj, p, "e")[0],
                 naive_edge_conv(x64, edges, t["e.g1.w"], t["e.g1.b"], t["e.g2.w"], t["e.g2.b"])),
                (sage_conv_forward(x, adj, p, "e.s")[0],
                 naive_sage_conv(x64, edges, t["e.s.w"], t["e.s.b"])),
                (sage_conv_forward(x, adj, p, "e.h")[0],
                 naive_sage_conv(x64, edges, t["e.h.w"], t["e.h.b"])),
                (maxpool_forward(x, adj)[0], naive_maxpool(x64, edges)),
            ]
            for got, ref in pairs:
                # error relative to max(1, |reference|): absolute 1e-5 for unit-scale outputs
                worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(1, np.abs(ref)))))
        d["msg"] = f"100 graphs <= 50 nodes, max scaled error {worst:.1e}"
        assert worst <= 1e-5


def test_04_parameter_count():
    with criterion(4, "parameter count") as d:
        count = param_count(ModelConfig())
        sweep = [param_count(ModelConfig(filter_dim=f)) for f in FILTER_DIMS]
        d["msg"] = (f"default {count:,} vs {REFERENCE_PARAMS:,} ({count / REFERENCE_PARAMS - 1:+.2%}); "
                    f"filter dims {dict(zip(FILTER_DIMS, sweep))}")
        assert abs(count - REFERENCE_PARAMS) <= 0.05 * REFERENCE_PARAMS
        assert all(a < b for a, b in zip(sweep, sweep[1:]))


def test_05_structural_invariants():
    with criterion(5, "graph structural invariants") as d:
        rng = np.random.default_rng(505)
        taus = [0.0, 0.1, 0.3, 0.5, 0.9, 1.5, 3.0]
        sets = 100
        for _ in range(sets):
            boxes = random_boxes(rng, int(rng.integers(1, 301)), span=10.0)
            chunk = build_chunk_graphs(order_and_chunk(boxes, 10_000)[0], 0.9)
            f, b, u = (chunk.edge_sets[v].pairs() for v in ("forward", "backward", "undirected"))
            assert {(dst, src) for src, dst in f} == b
            assert f | b == u
            for pairs in (f, b, u):
                assert sum(s == t for s, t in pairs) == chunk.node_count
            for v in VARIANTS:
                counts = [len(build_edges(chunk, tau, v)) for tau in taus]
                assert counts == sorted(counts)
            n = int(rng.integers(1, 60))
            chunks = order_and_chunk(boxes, n)
            keys = [x.key for c in chunks for x in c.nodes]
            assert len(keys) == len(set(keys)) == len(boxes) and set(keys) == {x.key for x in boxes}
        d["msg"] = f"mirror, union, self-loops, tau monotonicity, partition on {sets} random sets"


def test_06_separable_end_to_end(tmp_path):
    with criterion(6, "separable synth -> train -> eval") as d:
        t0 = time.perf_counter()
        spec = tmp_path / "spec.txt"
        spec.write_text("mode = separable\n")
        cfg = tmp_path / "train.txt"
        cfg.write_text("".join(f"{k} = {v}\n" for k, v in DESK.items())
                       + f"epochs = {SEPARABLE_EPOCHS}\n")
        for split, seed in (("train", 1), ("eval", 2)):
            assert main(["synth", "--spec", str(spec), "--seed", str(seed),
                         "--out-dir", str(tmp_path / split)]) == 0
        assert main(["train", "--tracks", str(tmp_path / "train/tracks.csv"),
                     "--features", str(tmp_path / "train/features.bin"), "--config", str(cfg),
                     "--out", str(tmp_path / "m.ckpt")]) == 0
        assert main(["infer", "--tracks", str(tmp_path / "eval/tracks.csv"),
                     "--features", str(tmp_path / "eval/features.bin"),
                     "--ckpt", str(tmp_path / "m.ckpt"), "--out", str(tmp_path / "p.csv")]) == 0
        assert main(["eval", "--predictions", str(tmp_path / "p.csv"),
                     "--tracks", str(tmp_path / "eval/tracks.csv"),
                     "--out", str(tmp_path / "ap.csv")]) == 0
        ap = float((tmp_path / "ap.csv").read_text().splitlines()[1].split(",")[1])
        elapsed = time.perf_counter() - t0
        d["msg"] = f"AP {ap:.4f} (>= 0.98) in {elapsed:.0f}s (< 300s)"
        assert ap >= 0.98 and elapsed < 300


def _harness(spec, rows, modality):
    train_set, eval_set = generate_synthetic(spec, 11), generate_synthetic(spec, 12)
    per_seed = []
    for seed in SEEDS:
        cfg = TrainConfig(epochs=HARNESS_EPOCHS, seed=seed, **DESK)
        report = run_ablation(train_set, cfg, eval_set, rows=rows, modality=modality)
        per_seed.append({r.name: r.ap for r in report.rows})
    mean = {k: float(np.mean([s[k] for s in per_seed])) for k in per_seed[0]}
    return per_seed, mean


def test_07_contextual_reasoning():
    with criterion(7, "contextual reasoning (graph ablation, 3-seed mean)") as d:
        spec = SyntheticSpec.contextual(n_videos=20)
        per_seed, m = _harness(spec, None, modality=False)
        full, base = m["graph+bidir+drpt+spfeat"], m["no_graph"]
        d["msg"] = (f"no-graph {base:.3f} <= undirected {m['graph']:.3f} <= bi-dir "
                    f"{m['graph+bidir']:.3f}; +drpt {m['graph+bidir+drpt']:.3f}; full {full:.3f} "
                    f"(+{100 * (full - base):.1f} pts); per-seed full-minus-no-graph "
                    f"{[round(100 * (s['graph+bidir+drpt+spfeat'] - s['no_graph']), 1) for s in per_seed]}")
        assert full - base >= 0.05
        assert base <= m["graph"] <= m["graph+bidir"]


def test_08_modality_ordering():
    with criterion(8, "modality ordering (3-seed mean)") as d:
        # contextual dynamics, visual evidence stronger than audio
        spec = SyntheticSpec.contextual(n_videos=20, visual_snr=1.2, audio_snr=0.8)
        per_seed, m = _harness(spec, ["audio_only", "video_only", "audio+video"], modality=True)
        d["msg"] = (f"both {m['audio+video']:.3f} >= video {m['video_only']:.3f} >= audio "
                    f"{m['audio_only']:.3f}; per seed (a, v, a+v) "
                    f"{[tuple(round(s[k], 3) for k in ('audio_only', 'video_only', 'audio+video')) for s in per_seed]}")
        assert m["audio+video"] >= m["video_only"] >= m["audio_only"]


def test_09_average_precision():
    with criterion(9, "average precision vs brute-force threshold sweep") as d:
        rng = np.random.default_rng(909)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(1, 200))
            labels = rng.integers(0, 2, n)
            labels[rng.integers(n)] = 1
            scores = rng.random(n)
            worst = max(worst, abs(average_precision(scores, labels) - brute_force_ap(scores, labels)))
        hand = average_precision([0.9, 0.8, 0.3], [1, 0, 1])
        d["msg"] = f"1000 sets, max |diff| {worst:.1e}; hand example {hand:.6f} (5/6)"
        assert worst <= 1e-12 and abs(hand - 5 / 6) <= 1e-15


def test_10_determinism(tmp_path):
    with criterion(10, "pipeline determinism") as d:
        spec = tmp_path / "spec.txt"
        spec.write_text("mode = contextual\nn_videos = 4\n")
        cfg = tmp_path / "train.txt"
        cfg.write_text("epochs = 3\nbatch_size = 2\nlr_max = 1e-3\n")
        outputs = []
        for run in ("a", "b"):
            root = tmp_path / run
            assert main(["synth", "--spec", str(spec), "--seed", "9", "--out-dir", str(root)]) == 0
            data = ["--tracks", str(root / "tracks.csv"), "--features", str(root / "features.bin")]
            assert main(["train", *data, "--config", str(cfg), "--seed", "4",
                         "--out", str(root / "m.ckpt"), "--history", str(root / "loss.csv")]) == 0
            assert main(["infer", *data, "--ckpt", str(root / "m.ckpt"),
                         "--out", str(root / "pred.csv")]) == 0
            outputs.append({f: (root / f).read_bytes()
                            for f in ("tracks.csv", "features.bin", "m.ckpt", "loss.csv", "pred.csv")})
        same = [f for f in outputs[0] if outputs[0][f] == outputs[1][f]]
        d["msg"] = f"byte-identical across two runs: {', '.join(same)}"
        assert same == list(outputs[0])


def test_11_scale_smoke():
    with criterion(11, "inference at scale") as d:
        spec = SyntheticSpec(n_videos=50, identities=4, duration=100, fps=5)
        full = generate_synthetic(spec, 0)
        model = SpellModel.create(ModelConfig(), seed=0)
        cfg = TrainConfig()

        def timed(k, repeats):
            best = np.inf
            for _ in range(repeats):
                subset = full.subset(full.video_ids()[:k])   # fresh: graph building is timed too
                t0 = time.perf_counter()
                scores = predict(model, subset, cfg)
                best = min(best, time.perf_counter() - t0)
            return len(subset), len(subset.chunks(cfg.n, cfg.tau)), best, scores

        n_small, _, t_small, _ = timed(5, 3)
        n_big, chunks, t_big, scores = timed(50, 1)
        ratio = t_big / t_small
        d["msg"] = (f"{n_big:,} nodes in {chunks} chunks: {t_big:.2f}s (< 10s); "
                    f"{n_small:,} nodes: {t_small:.2f}s; ratio {ratio:.1f} "
                    f"(<= {10 * SCALING_SLACK:.1f})")
        assert n_big == 100_000 and chunks == 50 and np.all(np.isfinite(scores))
        assert t_big < 10 and ratio <= 10 * SCALING_SLACK
