"""Acceptance criteria, one test each, at their stated tolerances and time budgets.

A summary line per criterion is printed at the end of the pytest run.
"""
import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from gctnet import gradcheck, harness
from gctnet.analysis import gamma_stats
from gctnet.gct import GctParams, channel_normalize, gct_forward
from gctnet.harness import RunConfig
from gctnet.network import build_network, save_checkpoint, smallcnn
from oracles import gct_scalar

REPO = Path(__file__).resolve().parents[1]
CIFAR_DIR = Path(os.environ.get("GCT_CIFAR10_DIR", REPO / "data" / "cifar-10-batches-bin"))


def rel(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


@pytest.mark.criterion(1, "identity at initialization")
def test_identity_at_initialization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for i in range(100):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 33)),
                 int(rng.integers(1, 17)), int(rng.integers(1, 17)))
        dtype = np.float32 if i % 2 else np.float64
        x = (rng.standard_normal(shape) * 10.0 ** rng.uniform(-3, 3)).astype(dtype)
        out, _ = gct_forward(x, GctParams.init(shape[1], dtype))
        assert np.array_equal(out, x), shape

    x = rng.standard_normal((8, 3, 32, 32)).astype(np.float32)
    base = build_network(smallcnn(), seed=11)
    gct = build_network(smallcnn(placement="before_conv"), seed=11)
    assert len(gct.gct_layers()) == 3
    assert np.array_equal(base.forward(x, train=False), gct.forward(x, train=False))
    assert np.array_equal(base.forward(x, train=True), gct.forward(x, train=True))
    assert time.perf_counter() - t0 < 10


@pytest.mark.criterion(2, "gradient oracle, every layer kind and GCT variant")
def test_gradient_oracle():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(instances=50, seed=0)
    elapsed = time.perf_counter() - t0
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_rel_error)
    print(f"{len(results)} cases, worst {worst.name} {worst.max_rel_error:.2e}, {elapsed:.1f} s")
    assert not failed, failed
    assert all(r.instances == 50 for r in results)
    combos = {k for k in (r.name for r in results) if k.startswith("gct[")}
    assert len(combos) >= 9
    assert elapsed < 120


@pytest.mark.criterion(3, "forward matches scalar oracle (200 instances)")
def test_forward_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(200):
        n, c = int(rng.integers(1, 4)), int(rng.integers(1, 7))
        x = rng.standard_normal((n, c, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
        alpha, gamma, beta = rng.normal(1, 0.5, c), rng.normal(0, 1, c), rng.normal(0, 1, c)
        eps = 1e-5
        if i % 4 == 1:
            eps = 0.0
        if i % 4 == 2:
            alpha[rng.random(c) < 0.5] = 0.0
            if not alpha.any():
                alpha[0] = 1.0 if eps == 0.0 else 0.0  # all-zero alpha only with eps > 0
        if i % 4 == 3:
            alpha[:] = 0.0
        p = GctParams(alpha, gamma, beta, epsilon=eps)
        out, _ = gct_forward(x, p)
        err = rel(out, gct_scalar(x, alpha, gamma, beta, eps))
        worst = max(worst, err)
    print(f"max relative error {worst:.2e}")
    assert worst < 1e-12


@pytest.mark.criterion(4, "normalization invariants")
def test_normalization_invariants():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n, c = int(rng.integers(1, 5)), int(rng.integers(1, 65))
        p = GctParams(rng.normal(1, 0.5, c), rng.normal(0, 2, c), rng.normal(0, 2, c), epsilon=0.0)
        x = rng.standard_normal((n, c, 3, 3)) * 10.0 ** rng.uniform(-2, 2)
        out, cache = gct_forward(x, p)
        # sum of squared normalized embeddings equals C
        assert np.abs((cache.s_hat ** 2).sum(axis=1) - c).max() < 1e-10
        s = rng.normal(0, 1, (n, c))
        assert np.abs((channel_normalize(s, p) ** 2).sum(axis=1) - c).max() < 1e-10
        # gate bounds; above z ~ 18.7 the nearest double to 1 + tanh(z) is 2 itself
        assert np.all(cache.gate > 0) and np.all(cache.gate <= 2)
        assert np.all(cache.gate[cache.z < 18] < 2)
        # positive scaling leaves the gate unchanged
        k = 10.0 ** rng.uniform(-3, 3)
        out_k, cache_k = gct_forward(k * x, p)
        assert rel(cache_k.gate, cache.gate) < 1e-12
        assert rel(out_k, k * out) < 1e-12
        # channel permutation equivariance, exactly
        perm = rng.permutation(c)
        q = GctParams(p.alpha[perm], p.gamma[perm], p.beta[perm], epsilon=0.0)
        out_p, _ = gct_forward(x[:, perm], q)
        assert np.array_equal(out_p, out[:, perm])


@pytest.mark.criterion(5, "ResNet-50 parameter and FLOP accounting via count-cost")
def test_parameter_accounting(tmp_path, capsys):
    t0 = time.perf_counter()
    out = tmp_path / "cost.json"
    rc = harness.main(["count-cost", "--spec", "resnet50", "--input-shape", "1,3,224,224",
                       "--placement", "before_conv", "--output", str(out)])
    elapsed = time.perf_counter() - t0
    assert rc == 0
    d = json.loads(out.read_text())
    base_params = d["baseline"]["total_params"] / 1e6
    gct_params = d["report"]["total_params"] / 1e6
    base_gflops = d["baseline"]["total_macs"] / 1e9
    print(f"params {base_params:.3f}M -> {gct_params:.3f}M (+{d['added_params'] / 1e6:.4f}M), "
          f"baseline {base_gflops:.3f} GFLOPs, {elapsed * 1e3:.0f} ms")
    assert 0.06 <= d["added_params"] / 1e6 <= 0.08
    assert abs(base_gflops - 3.879) / 3.879 <= 0.03
    assert elapsed < 1.0


def _cifar_files():
    train = [CIFAR_DIR / f"data_batch_{i}.bin" for i in range(1, 6)]
    val = [CIFAR_DIR / "test_batch.bin"]
    return train, val


@pytest.mark.criterion(6, "desk-scale CIFAR-10 training: GCT >= baseline - 0.2 points, finite loss")
def test_cifar10_training_benefit(tmp_path):
    train_files, val_files = _cifar_files()
    missing = [str(p) for p in train_files + val_files if not p.is_file()]
    if missing:
        pytest.fail(f"CIFAR-10 binary batches not found ({len(missing)} files missing under "
                    f"{CIFAR_DIR}); set GCT_CIFAR10_DIR to the cifar-10-batches-bin directory")
    t0 = time.perf_counter()
    acc = {"none": [], "before_conv": []}
    for seed in (0, 1, 2):
        for placement in acc:
            run = RunConfig.from_dict({
                "network": "miniresnet", "placement": placement,
                "gct": {"embed_norm": "l2", "channel_norm": "l2", "adaptation": "one_plus_tanh"},
                "train": {"epochs": 20},
                "data": {"kind": "cifar10", "train": [str(p) for p in train_files],
                         "val": [str(p) for p in val_files], "augment": "flip_crop"},
                "output_dir": str(tmp_path / f"{placement}_{seed}"), "seed": seed})
            res = harness.train(run)
            with open(Path(res["output_dir"]) / "steps.csv") as f:
                losses = [float(r["loss"]) for r in csv.DictReader(f)]
            assert losses and all(math.isfinite(v) for v in losses)
            acc[placement].append(res["history"][-1]["val_acc"])
    elapsed = time.perf_counter() - t0
    base, gct = np.mean(acc["none"]), np.mean(acc["before_conv"])
    print(f"baseline {acc['none']} mean {base:.4f}; gct {acc['before_conv']} mean {gct:.4f}; "
          f"{elapsed / 60:.1f} min")
    assert gct >= base - 0.002
    assert elapsed <= 3600 * 1.1


@pytest.mark.criterion(7, "analysis pipeline on fresh and fixture checkpoints")
def test_analysis_pipeline(tmp_path):
    fresh = build_network(smallcnn(placement="before_conv"), seed=5)
    save_checkpoint(tmp_path / "fresh.bin", fresh)
    for rec in gamma_stats(fresh):
        assert rec.gamma_mean == 0 and rec.gamma_std == 0

    for name, value in (("neg", -0.5), ("pos", 0.5)):
        net = build_network(smallcnn(placement="before_conv"), seed=5)
        for layer in net.gct_layers():
            layer.params["gamma"][:] = value
        save_checkpoint(tmp_path / f"{name}.bin", net)

    rows = {}
    for name in ("fresh", "neg", "pos"):
        out = tmp_path / name
        rc = harness.main(["analyze", "--checkpoint", str(tmp_path / f"{name}.bin"),
                           "--output-dir", str(out), "--seed", "1"])
        assert rc == 0
        with open(out / "analysis.csv") as f:
            rows[name] = list(csv.DictReader(f))
        assert len(rows[name]) == 3

    for r in rows["fresh"]:
        assert abs(float(r["variance_ratio_global"]) - 1.0) <= 1e-6
        assert float(r["gamma_mean"]) == 0 and float(r["gamma_std"]) == 0
    for r in rows["neg"]:
        assert float(r["variance_ratio_global"]) < 1, r
    for r in rows["pos"]:
        assert float(r["variance_ratio_global"]) > 1, r


@pytest.mark.criterion(8, "byte-identical metrics.csv for identical config and seed")
def test_determinism(tmp_path):
    cfg = {"network": "smallcnn", "placement": "before_conv",
           "train": {"epochs": 2, "batch_size": 32},
           "data": {"kind": "synthetic", "train_size": 160, "val_size": 64,
                    "augment": "flip_crop"},
           "output_dir": "unused", "seed": 7}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    for d in ("first", "second"):
        assert harness.main(["train", "--config", str(path), "--output-dir", str(tmp_path / d)]) == 0
    a = (tmp_path / "first" / "metrics.csv").read_bytes()
    b = (tmp_path / "second" / "metrics.csv").read_bytes()
    assert a.count(b"\n") == 3
    assert a == b
