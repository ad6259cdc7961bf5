"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line; the lines are printed together at
the end of the pytest run (see ``conftest.py``) and the test asserts the same
condition at its stated tolerance.
"""
import math
import os
import time

import numpy as np
import pytest
import torch
from PIL import Image

from trangcn.cli import run, sha256_file
from trangcn.config import ArchConfig, TrainConfig
from trangcn.conv import ConvBranch
from trangcn.core import ParamStore, grad_check, init_params, init_tensors
from trangcn.data import POSE_BENCHMARK, generate_synthetic, load_market_dir, parse_market_name
from trangcn.gcm import (GraphModule, PersonGraph, aggregate, gcn_layer, init_edge_affinity, normalized_adjacency)
from trangcn.losses import (PoseTargets, TripletBatch, contrastive_loss, id_classification_loss, pose_loss,
                            triplet_loss)
from trangcn.metrics import RetrievalRun, available_backends, cmc_at_k, mean_average_precision
from trangcn.model import build_model, call_with, num_tokens
from trangcn.pose import PoseBranch
from trangcn.training import default_arch, train_and_evaluate
from trangcn.transformer import EncoderOutput, TokenSequence, TransformerBranch

f64 = torch.float64
RESULTS: list[str] = []


def report(number: int, ok: bool, title: str, detail: str) -> None:
    RESULTS.append(f"[criterion {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")


def seeded(module, seed=0):
    module = module.double()
    ParamStore(init_tensors({k: tuple(v.shape) for k, v in module.named_parameters()}, seed, f64)).load_into(module)
    return module


# -- 1. gradient suite ---------------------------------------------------------------------

def _away_from_kinks(values, margin, tol=1e-3):
    return bool(torch.all((values - margin).abs() > tol))


def _pose_case(g):
    store = ParamStore({"s": torch.randn(2, 3, 2, 1, dtype=f64, generator=g),
                        "l": torch.randn(2, 4, dtype=f64, generator=g)})
    targets = PoseTargets(torch.rand(2, 3, 2, 1, dtype=f64, generator=g), torch.rand(2, 4, dtype=f64, generator=g))
    return lambda p: pose_loss(torch.sigmoid(p["s"]), torch.sigmoid(p["l"]), targets), store


def _contrastive_case(g):
    while True:
        store = ParamStore({k: torch.randn(3, 4, dtype=f64, generator=g) for k in ("f", "p", "n")})
        y = torch.randint(0, 2, (3,), generator=g).to(f64)
        margin = float(torch.rand(1, generator=g)) * 8 + 0.5
        d_pos = (store["f"] - store["p"]).pow(2).sum(-1)
        if _away_from_kinks(d_pos, margin):
            return lambda p: contrastive_loss(p["f"], p["p"], p["n"], y, margin), store


def _triplet_case(g):
    while True:
        store = ParamStore({k: torch.randn(3, 4, dtype=f64, generator=g) for k in ("a", "p", "n")})
        margin = float(torch.rand(1, generator=g)) * 6 + 0.1
        slack = (store["a"] - store["p"]).pow(2).sum(-1) - (store["a"] - store["n"]).pow(2).sum(-1)
        if _away_from_kinks(slack, -margin):
            return lambda p: triplet_loss(TripletBatch(p["a"], p["p"], p["n"], margin)), store


def _id_case(g):
    store = ParamStore({"z": torch.randn(3, 5, dtype=f64, generator=g) * 2})
    label = torch.randint(0, 5, (3,), generator=g)
    return lambda p: id_classification_loss(p["z"], label), store


def _gcm_case(g):
    k, d = 4, 4
    gcm = seeded(GraphModule(k, d, d, d_res=d, d_trans=d, gcn_dims=(d, d), final_dim=d, num_classes=3),
                 int(torch.randint(0, 10_000, (1,), generator=g)))
    kp = torch.zeros(1, k, 3, dtype=f64)
    kp[0, :, 0] = torch.randint(0, 2, (k,), generator=g).to(f64)
    label = torch.randint(0, 3, (1,), generator=g)
    store = ParamStore({**{n: v.detach() for n, v in gcm.named_parameters()},
                        "in.S": torch.rand(1, k, 2, 1, dtype=f64, generator=g),
                        "in.limbs": torch.rand(1, k, k, dtype=f64, generator=g),
                        "in.full": torch.randn(1, d, 2, 1, dtype=f64, generator=g),
                        "in.seq": torch.randn(1, k + 1, d, dtype=f64, generator=g)})

    def loss(p):
        upper = torch.triu(p["in.limbs"], diagonal=1)
        weights = ParamStore({n: v for n, v in p.items() if not n.startswith("in.")})
        _, fused = call_with(gcm, weights, "forward", p["in.S"], upper + upper.transpose(-1, -2), kp, p["in.full"],
                             EncoderOutput(p["in.seq"]), (2, 1))
        return id_classification_loss(fused.logits, label)

    return loss, store


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst, failures, counts = {}, [], {}
    for name, make in [("pose_loss", _pose_case), ("contrastive_loss", _contrastive_case),
                       ("triplet_loss", _triplet_case), ("id_classification_loss", _id_case), ("gcm_stack", _gcm_case)]:
        g = torch.Generator().manual_seed(len(name))
        for i in range(20):
            loss, store = make(g)
            for r in grad_check(loss, store, eps=1e-5, tol=1e-4):
                worst[name] = max(worst.get(name, 0.0), r.max_rel_error)
                if not r.passed:
                    failures.append((name, i, r.path, r.max_rel_error))
            counts[name] = i + 1
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120 and all(c >= 20 for c in counts.values())
    detail = ", ".join(f"{n} max rel err {e:.1e}" for n, e in worst.items())
    report(1, ok, "finite-difference gradients, 20 instances each, float64, < 1e-4",
           f"{detail}; {elapsed:.1f} s")
    assert not failures, failures[:5]
    assert elapsed < 120


# -- 2. normalization invariants ---------------------------------------------------------------

@torch.no_grad()
def test_criterion_2_normalization():
    worst_attn, worst_soft = 0.0, 0.0
    g = torch.Generator().manual_seed(2)
    for mode, size in [("rawp", (64, 32)), ("cnn", (128, 64)), ("keypoint", (64, 32))] * 3:
        arch = ArchConfig(image_size=size, tokens=mode, depth=3, heads=4)
        model = build_model(arch, init_params(arch, int(torch.randint(0, 1000, (1,), generator=g)), f64))
        images = torch.rand(3, 3, *size, dtype=f64, generator=g)
        b = model.branches(images)
        seq = model.transformer.tokenize(images, b.conv, b.pose.keypoints, model.pose_grid)
        out = model.transformer.encode(seq, keep_attention=True)
        assert len(out.attention) == 3
        for w in out.attention:
            worst_attn = max(worst_attn, float((w.sum(-1) - 1).abs().max()))
        probs = model(images).fused.probabilities
        worst_soft = max(worst_soft, float((probs.sum(-1) - 1).abs().max()))
    ok = worst_attn <= 1e-6 and worst_soft <= 1e-6
    report(2, ok, "attention rows and class probabilities sum to 1 (1e-6)",
           f"max attention deviation {worst_attn:.1e}, max softmax deviation {worst_soft:.1e}")
    assert ok


# -- 3. structural invariants ------------------------------------------------------------------

@torch.no_grad()
def test_criterion_3_structure():
    g = torch.Generator().manual_seed(3)
    gcm = seeded(GraphModule(6, 5, 5, d_res=5, d_trans=5, gcn_dims=(7, 6), final_dim=4, num_classes=3), 1)
    perm_err = 0.0
    for _ in range(10):
        h = torch.randn(6, gcm.node_dim, dtype=f64, generator=g)
        a = torch.rand(6, 6, dtype=f64, generator=g)
        edge = init_edge_affinity((a + a.T).fill_diagonal_(0))
        perm = torch.randperm(6, generator=g)
        out = gcm.propagate(PersonGraph(h, edge, normalized_adjacency(edge)))
        pe = edge[perm][:, perm]
        out_p = gcm.propagate(PersonGraph(h[perm], pe, normalized_adjacency(pe)))
        f = gcm.fuse_and_classify(aggregate(out), out).f_final
        f_p = gcm.fuse_and_classify(aggregate(out_p), out_p).f_final
        perm_err = max(perm_err, float((out_p - out[perm]).abs().max()), float((f_p - f).abs().max()))
    eye_ok = torch.equal(normalized_adjacency(torch.zeros(18, 18, dtype=f64)), torch.eye(18, dtype=f64))
    h = torch.rand(18, 9, dtype=f64, generator=g)
    ident_ok = torch.equal(gcn_layer(h, torch.eye(18, dtype=f64), torch.eye(9, dtype=f64)), h)

    branch = seeded(TransformerBranch("rawp", 8, d_model=16, heads=4, depth=2, patch_size=16), 4)
    with torch.no_grad():
        branch.pos_encoding.zero_()
    equiv_err = 0.0
    for _ in range(10):
        seq = branch.tokenize_raw(torch.rand(2, 3, 64, 32, dtype=f64, generator=g))
        perm = torch.cat([torch.randperm(8, generator=g), torch.tensor([8])])
        out = branch.encode(seq).sequence
        out_p = branch.encode(TokenSequence(seq.tokens[:, perm], seq.pos_encoding)).sequence
        equiv_err = max(equiv_err, float((out_p - out[:, perm]).abs().max()))
    ok = perm_err <= 1e-10 and eye_ok and ident_ok and equiv_err <= 1e-10
    report(3, ok, "graph permutation consistency, identity adjacency, transformer equivariance (1e-10)",
           f"graph {perm_err:.1e}, A_hat=I {eye_ok}, identity layer {ident_ok}, attention {equiv_err:.1e}")
    assert ok


# -- 4. metric oracle ------------------------------------------------------------------------

def _oracle(q, g, q_ids, g_ids, q_cams, g_cams, cam_filter, k):
    hits, aps = [], []
    for i in range(len(q)):
        order = sorted(range(len(g)), key=lambda j: (math.dist(q[i], g[j]), j))
        if cam_filter:
            order = [j for j in order if not (g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i])]
        rel = [g_ids[j] == q_ids[i] for j in order]
        if not any(rel):
            continue
        hits.append(float(any(rel[:k])))
        found, ap = 0, 0.0
        for pos, r in enumerate(rel, 1):
            if r:
                found += 1
                ap += found / pos
        aps.append(ap / found)
    return (sum(hits) / len(hits), sum(aps) / len(aps)) if hits else (0.0, 0.0)


def test_criterion_4_metric_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        nq, ng, d = int(rng.integers(1, 21)), int(rng.integers(1, 51)), int(rng.integers(1, 4))
        q, g = rng.integers(0, 4, (nq, d)).astype(float), rng.integers(0, 4, (ng, d)).astype(float)
        n_ids = int(rng.integers(1, 8))
        qi, gi = rng.integers(0, n_ids, nq), rng.integers(0, n_ids, ng)
        qc, gc = rng.integers(1, 3, nq), rng.integers(1, 3, ng)
        cf = bool(rng.integers(2))
        run_ = RetrievalRun(q, g, qi, gi, qc, gc, cam_filter=cf)
        args = (q.tolist(), g.tolist(), qi.tolist(), gi.tolist(), qc.tolist(), gc.tolist(), cf)
        for backend in available_backends():
            for k in (1, 5, 10):
                worst = max(worst, abs(cmc_at_k(run_, k, backend) - _oracle(*args, k)[0]))
            worst = max(worst, abs(mean_average_precision(run_, backend) - _oracle(*args, 1)[1]))
    worked = mean_average_precision(RetrievalRun([[0.0]], [[0.0], [1.0], [2.0], [3.0]], [7], [7, 1, 7, 2]))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and abs(worked - (1 + 2 / 3) / 2) <= 1e-12 and elapsed < 60
    report(4, ok, "CMC and mAP match brute-force oracles on 200 instances (1e-12)",
           f"max deviation {worst:.1e} over backends {','.join(available_backends())}; "
           f"worked AP {worked:.4f}; {elapsed:.1f} s")
    assert ok


# -- 5. shape contracts ------------------------------------------------------------------------

def test_criterion_5_shapes():
    checked = []
    for size in [(64, 32), (128, 64), (256, 128)]:
        rows, cols = size
        images = torch.rand(2, 3, rows, cols, dtype=f64)
        pose = seeded(PoseBranch())
        maps = pose(images)
        conv = seeded(ConvBranch())(images)
        assert maps.S.shape == (2, 18, rows // 32, cols // 32) and maps.pafs.shape == (2, 19)
        assert maps.affinity.shape == (2, 18, 18) and maps.keypoints.shape == (2, 18, 3)
        assert conv.full.shape == (2, 64, rows // 16, cols // 16)
        assert conv.early.shape == (2, 32, rows // 8, cols // 8)
        for tokens in ("rawp", "cnn", "keypoint"):
            arch = ArchConfig(image_size=size, tokens=tokens)
            model = build_model(arch, init_params(arch, 0, f64))
            out = model(images)
            n = num_tokens(arch)
            assert out.branches.encoder.sequence.shape == (2, n + 1, arch.d_model)
            assert out.graph.h_node.shape == (2, 18, arch.node_conf_dim + arch.d_res + arch.d_trans)
            assert out.graph.adjacency_hat.shape == (2, 18, 18)
            assert out.fused.f_final.shape == (2, arch.final_dim)
            assert out.fused.logits.shape == (2, arch.num_classes)
        checked.append(f"{rows}x{cols}")
    report(5, True, "branch and graph shapes", f"checked {', '.join(checked)} for all token modes")


# -- 6. overfit smoke ----------------------------------------------------------------------------

def test_criterion_6_overfit_smoke():
    t0 = time.perf_counter()
    data = generate_synthetic(8, 16, (64, 32), 3, "easy")
    _, _, rep = train_and_evaluate(TrainConfig(seed=0), data, default_arch(data))
    elapsed = time.perf_counter() - t0
    ok = rep.rank_k[1] >= 0.95 and elapsed < 600
    report(6, ok, "easy synthetic set, default schedule, Rank-1 >= 0.95 in < 10 min",
           f"Rank-1 {rep.rank_k[1]:.3f}, mAP {rep.mAP:.3f}, {elapsed:.1f} s")
    assert rep.rank_k[1] >= 0.95
    assert elapsed < 600


# -- 7. ablation ordering --------------------------------------------------------------------------

def test_criterion_7_ablation_ordering():
    data = generate_synthetic(seed=0, **POSE_BENCHMARK)
    means = {}
    for variant in ("baseline", "gcm", "tran_gcn"):
        reps = [train_and_evaluate(TrainConfig(seed=s), data, default_arch(data, variant=variant))[2]
                for s in (0, 1, 2)]
        means[variant] = (float(np.mean([r.rank_k[1] for r in reps])), float(np.mean([r.mAP for r in reps])))
    r1 = [means[v][0] for v in ("tran_gcn", "gcm", "baseline")]
    mp = [means[v][1] for v in ("tran_gcn", "gcm", "baseline")]
    ok = r1[0] >= r1[1] >= r1[2] and mp[0] >= mp[1] >= mp[2]
    detail = "; ".join(f"{v} Rank-1 {means[v][0]:.3f} mAP {means[v][1]:.3f}" for v in means)
    report(7, ok, "pose benchmark, mean of 3 seeds: tran_gcn >= gcm >= baseline (directional)", detail)
    assert ok, means


# -- 8. determinism -----------------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    fast = ["--set", "pose_epochs=3", "--set", "conv_epochs=3", "--set", "trans_epochs=3", "--set", "joint_epochs=4"]
    digests = []
    for name in ("a", "b"):
        root = tmp_path / name
        assert run(["generate", "--ids", "4", "--per-id", "6", "--seed", "2", "--out", str(root / "d")]) == 0
        assert run(["train", "--data", str(root / "d"), "--seed", "5", "--out", str(root / "r"), *fast]) == 0
        assert run(["eval", "--checkpoint", str(root / "r" / "model.ckpt"), "--data", str(root / "d"),
                    "--out", str(root / "e")]) == 0
        assert run(["ablate", "--data", str(root / "d"), "--seeds", "1", "--out", str(root / "x"), *fast]) == 0
        files = ["r/model.ckpt", "r/train_log.csv", "e/metrics.txt", "e/metrics.json",
                 "x/ablation_runs.csv", "x/ablation_table.csv"]
        digests.append({f: sha256_file(root / f) for f in files})
    same = [f for f in digests[0] if digests[0][f] == digests[1][f]]
    ok = len(same) == len(digests[0])
    report(8, ok, "reruns give bit-identical CSVs and checkpoints", f"{len(same)}/{len(digests[0])} files identical")
    assert ok


# -- 9. ingestion ----------------------------------------------------------------------------------------

def test_criterion_9_ingestion(tmp_path):
    tree = {"bounding_box_train": ["0002_c1s1_000451_03.jpg", "0007_c2s3_070952_01.jpg"],
            "query": ["0002_c3s1_000551_00.jpg", "0007_c1s4_071201_00.jpg"],
            "bounding_box_test": ["-1_c1s1_000401_03.jpg", "0000_c6s1_002546_01.jpg"]}
    for sub, names in tree.items():
        (tmp_path / sub).mkdir()
        for name in names:
            Image.new("RGB", (64, 128)).save(tmp_path / sub / name)
    ds = load_market_dir(tmp_path)
    fixture_ok = (ds.train.ids.tolist() == [0, 1] and ds.train.cams.tolist() == [1, 2]
                  and ds.query.ids.tolist() == [2, 7] and ds.gallery.ids.tolist() == [0]
                  and parse_market_name("0002_c1s1_000451_03.jpg") == (2, 1))
    root = os.environ.get("MARKET1501_ROOT")
    if not root:
        report(9, fixture_ok, "Market-1501 ingestion",
               "6-file fixture tree parsed; genuine dataset absent (set MARKET1501_ROOT), count check skipped")
        assert fixture_ok
        pytest.skip("genuine Market-1501 root not available; fixture tree validated")
    real = load_market_dir(root)
    counts = (len(real.train), real.num_train_ids, len(real.query), len(real.gallery))
    ok = fixture_ok and counts == (12936, 751, 3368, 15913)
    report(9, ok, "Market-1501 ingestion", f"train {counts[0]}/{counts[1]} ids, query {counts[2]}, gallery {counts[3]}")
    assert ok, counts
