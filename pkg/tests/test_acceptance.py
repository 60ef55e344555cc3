"""Acceptance suite: one test per criterion, each printing a pass line.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end learning
criterion trains ten models (5 folds x 2 modality configs) and dominates
the runtime.
"""

import json
import subprocess
import sys

import numpy as np
import pytest

from dact.dataset import (DatasetManifest, FrameRecord, generate_frame_sets,
                          restructure, sequences_for_split, subject_kfold)
from dact.evaluation import accuracy, binary_collapse, cross_validate
from dact.flow import (FlowField, FlowParams, dequantize_flow, estimate_flow,
                       quantize_flow)
from dact.fusion import FlowStore, inflate_first_conv
from dact.layers import conv2d_forward
from dact.network import (BackboneConfig, NetworkConfig, init_params, is_state,
                          loss_and_grads)
from dact.synth import CorpusConfig, synth_corpus
from dact.training import TrainConfig, lr_at

from conftest import sampled_gradient_error, shifted_pair


def report(name, detail):
    print(f"[PASS] {name}: {detail}")


def test_metric_arithmetic_matches_published_rates():
    cm = np.array([[887, 35], [6, 3403]])  # rows [safe, distracted]
    acc = accuracy(cm)
    _, metrics = binary_collapse(cm, safe_class=0)
    recall = metrics["binary_recall"]
    assert round(acc, 5) == 0.99053
    assert round(recall, 5) == 0.99824
    assert round(acc, 4) == 0.9905
    assert round(metrics["binary_accuracy"], 4) == 0.9905
    assert round(recall, 4) == 0.9982
    report("metric arithmetic", f"accuracy {acc:.5f}, recall {recall:.5f}")


def test_dataset_conversion_counting():
    records = []
    pairs = [(s, c) for s in range(31) for c in range(10)][:-2]
    extra = 4331 - 308 * 14  # 19 test sequences carry one extra frame
    train_total = 12977
    base_train, rem = divmod(train_total, 308)
    for idx, (s, c) in enumerate(pairs):
        n_test = 14 + (1 if idx < extra else 0)
        n_train = base_train + (1 if idx < rem else 0)
        for i in range(n_test):
            records.append(FrameRecord(f"te_{s}_{c}_{i}.png", f"s{s:02d}", c,
                                       i, "test"))
        for i in range(n_train):
            records.append(FrameRecord(f"tr_{s}_{c}_{i}.png", f"s{s:02d}", c,
                                       i, "train"))
    manifest = DatasetManifest(records, [f"c{i}" for i in range(10)],
                               [f"s{i:02d}" for i in range(31)])
    assert sum(1 for r in records if r.split_tag == "train") == 12977
    assert sum(1 for r in records if r.split_tag == "test") == 4331
    seqs = restructure(manifest)
    train_seqs = sequences_for_split(seqs, "train")
    test_seqs = sequences_for_split(seqs, "test")
    assert len(train_seqs) == 308
    assert len(test_seqs) == 308
    sets = [fs for seq in test_seqs for fs in generate_frame_sets(seq, 4)]
    assert len(sets) == 4331
    # feeding every set through evaluation conserves the count
    from dact.evaluation import EvalConfig, evaluate
    net = NetworkConfig(
        backbone=BackboneConfig(input_channels=3, stage_widths=(4,),
                                input_side=8),
        n_groups=4, num_classes=10, dropout=0.0)
    cm = evaluate(None, sets, EvalConfig(network=net),
                  classify=lambda item: item.source.class_label)
    assert int(cm.sum()) == 4331
    assert accuracy(cm) == 1.0
    report("dataset conversion counting",
           "12977 train -> 308 sequences; 4331 test frames -> 308 sequences "
           "-> 4331 4-frame sets; evaluation total conserved")


def test_gradient_correctness_all_layers_and_full_network():
    from dact import layers

    rng = np.random.default_rng(0)
    failures = []

    def check(name, f, x, analytic, tol=1e-4):
        err = sampled_gradient_error(f, x, analytic)
        if err >= tol:
            failures.append((name, err))

    # conv
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4) * 0.1
    dout = rng.standard_normal((2, 4, 6, 6))
    _, cache = layers.conv2d_forward(x, w, b)
    dx, dw, db = layers.conv2d_backward(dout, cache)

    def conv_loss():
        out, _ = layers.conv2d_forward(x, w, b)
        return float((out * dout).sum())

    check("conv.x", conv_loss, x, dx)
    check("conv.w", conv_loss, w, dw)
    check("conv.b", conv_loss, b, db)

    # batch norm, both modes
    xb = rng.standard_normal((3, 4, 5, 5)) * 2 + 1
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.standard_normal(4) * 0.3
    rm = rng.standard_normal(4) * 0.2
    rv = rng.uniform(0.5, 2.0, 4)
    doutb = rng.standard_normal(xb.shape)
    for mode in ("train", "eval"):
        _, cache, _, _ = layers.batchnorm_forward(xb, gamma, beta, rm, rv, mode)
        dxb, dgamma, dbeta = layers.batchnorm_backward(doutb, cache)

        def bn_loss(mode=mode):
            out, _, _, _ = layers.batchnorm_forward(xb, gamma, beta, rm, rv,
                                                    mode)
            return float((out * doutb).sum())

        check(f"bn[{mode}].x", bn_loss, xb, dxb)
        check(f"bn[{mode}].gamma", bn_loss, gamma, dgamma)
        check(f"bn[{mode}].beta", bn_loss, beta, dbeta)

    # relu (away from the kink)
    xr = rng.standard_normal((4, 7))
    xr[np.abs(xr) < 0.05] += 0.1
    doutr = rng.standard_normal(xr.shape)
    _, cache = layers.relu_forward(xr)

    def relu_loss():
        out, _ = layers.relu_forward(xr)
        return float((out * doutr).sum())

    check("relu.x", relu_loss, xr, layers.relu_backward(doutr, cache))

    # max pool and global average pool
    xp = rng.permutation(96).reshape(2, 3, 4, 4).astype(np.float64)
    doutp = rng.standard_normal((2, 3, 2, 2))
    _, cache = layers.maxpool2_forward(xp)

    def pool_loss():
        out, _ = layers.maxpool2_forward(xp)
        return float((out * doutp).sum())

    check("maxpool.x", pool_loss, xp, layers.maxpool2_backward(doutp, cache))

    xg = rng.standard_normal((2, 3, 4, 4))
    doutg = rng.standard_normal((2, 3))
    _, cache = layers.global_avgpool_forward(xg)

    def gap_loss():
        out, _ = layers.global_avgpool_forward(xg)
        return float((out * doutg).sum())

    check("gap.x", gap_loss, xg, layers.global_avgpool_backward(doutg, cache))

    # affine
    xa = rng.standard_normal((3, 6))
    wa = rng.standard_normal((6, 4))
    ba = rng.standard_normal(4)
    douta = rng.standard_normal((3, 4))
    _, cache = layers.affine_forward(xa, wa, ba)
    dxa, dwa, dba = layers.affine_backward(douta, cache)

    def affine_loss():
        out, _ = layers.affine_forward(xa, wa, ba)
        return float((out * douta).sum())

    check("affine.x", affine_loss, xa, dxa)
    check("affine.w", affine_loss, wa, dwa)
    check("affine.b", affine_loss, ba, dba)

    # dropout disabled is the identity
    xd = rng.standard_normal((2, 5))
    out, mask = layers.dropout_forward(xd, 0.3, "eval")
    assert out is xd and mask is None

    # softmax + cross entropy
    logits = rng.standard_normal((4, 5))
    targets = np.array([0, 2, 4, 1])
    _, _, dlogits = layers.softmax_cross_entropy(logits, targets)

    def ce_loss():
        val, _, _ = layers.softmax_cross_entropy(logits, targets)
        return val

    check("softmax_ce.logits", ce_loss, logits, dlogits)

    # end-to-end reduced network, eval-mode BN, dropout off
    cfg = NetworkConfig(
        backbone=BackboneConfig(input_channels=3, stage_widths=(4, 6),
                                input_side=8),
        n_groups=2, num_classes=3, dropout=0.0)
    params = init_params(cfg, seed=1, dtype=np.float64)
    xe = np.random.default_rng(0).random((2, 2, 3, 8, 8))
    te = np.array([0, 2])
    _, _, grads = loss_and_grads(xe, te, params, cfg, mode="eval")

    def net_loss():
        loss, _, _ = loss_and_grads(xe, te, params, cfg, mode="eval")
        return loss

    for name in params.tensors:
        if not is_state(name):
            check(f"net.{name}", net_loss, params.tensors[name], grads[name])

    assert not failures, f"gradient checks failed: {failures}"
    report("gradient correctness",
           "conv, bn train/eval, relu, pools, affine, dropout-off, "
           "softmax-ce and the reduced network all < 1e-4")


def test_flow_oracle():
    img_t, img_t1 = shifted_pair(seed=42, side=64, shift=3)
    field = estimate_flow(img_t, img_t1)
    epe = np.sqrt((field.u - 3.0) ** 2 + field.v ** 2)
    mean_epe = float(epe[5:-5, 5:-5].mean())
    assert mean_epe < 0.5

    img = np.random.default_rng(1).random((64, 64))
    same = estimate_flow(img, img.copy())
    sup = float(max(np.abs(same.u).max(), np.abs(same.v).max()))
    assert sup < 1e-3
    report("flow oracle",
           f"(3,0) shift interior mean EPE {mean_epe:.3f} px; "
           f"identical pair sup-norm {sup:.1e}")


def test_quantization_round_trip():
    worst_ratio = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        u = rng.normal(0, 3, (15, 11))
        v = rng.normal(0, 3, (15, 11))
        field = FlowField(11, 15, u, v)
        back = dequantize_flow(quantize_flow(field))
        m = max(np.abs(u).max(), np.abs(v).max())
        err = max(np.abs(back.u - u).max(), np.abs(back.v - v).max())
        assert err <= m / 255.0 + 1e-12
        worst_ratio = max(worst_ratio, err / (m / 255.0))
    qf = quantize_flow(FlowField(3, 1, np.array([[-2.0, 0.0, 2.0]]),
                                 np.zeros((1, 3))))
    assert qf.qu.tolist() == [[0, 128, 255]]
    report("quantization",
           f"100 random fields round-trip within M/255 (worst {worst_ratio:.4f} "
           "of bound); endpoints -> {0, 255}, zero -> 128")


def test_weight_inflation_bit_exact():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((8, 3, 3, 3))
    b = rng.standard_normal(8)
    x = rng.random((2, 3, 16, 16))
    base, _ = conv2d_forward(x, w, b)
    for m in (1, 2, 3):
        w_inf = inflate_first_conv(w, m)
        assert np.array_equal(w_inf[:, :3], w)
        x_ext = np.concatenate([x, np.zeros((2, 2 * m, 16, 16))], axis=1)
        ext, _ = conv2d_forward(x_ext, w_inf, b)
        assert np.array_equal(base, ext)
    report("weight inflation",
           "zero-flow input through inflated conv equals 3-channel conv "
           "bit-exactly (m in {1,2,3}); RGB slice recovery bit-exact")


def test_schedule_transitions_exact():
    short = TrainConfig(base_lr=1e-3, schedule=((1600, 10), (2800, 10)),
                        total_iterations=4000)
    long = TrainConfig(base_lr=1e-3, schedule=((7000, 10), (15000, 10)),
                       total_iterations=20000)
    assert lr_at(0, short) == 1e-3
    assert lr_at(1599, short) == 1e-3
    assert lr_at(1600, short) == 1e-4
    assert lr_at(2800, short) == 1e-5
    assert lr_at(6999, long) == 1e-3
    assert lr_at(7000, long) == 1e-4
    assert lr_at(15000, long) == 1e-5
    report("schedule", "1e-3 -> 1e-4 -> 1e-5 exactly at {1.6k, 2.8k} and "
                       "{7k, 15k}")


def _cli(*argv):
    proc = subprocess.run([sys.executable, "-m", "dact", *map(str, argv)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def test_training_determinism_across_jobs(tmp_path):
    corpus = tmp_path / "corpus"
    synth_corpus(CorpusConfig(classes=3, subjects=4, videos_per=1, frames=6,
                              side=32), seed=3, out_dir=corpus)
    args = ["train", "--manifest", corpus / "manifest.csv", "--n", "4",
            "--m", "0", "--iters", "6", "--schedule", "4:10",
            "--batch-size", "4", "--side", "32", "--stages", "4,8",
            "--seed", "7"]
    _cli(*args, "--out", tmp_path / "j1", "--jobs", "1")
    _cli(*args, "--out", tmp_path / "j4", "--jobs", "4")
    ck1 = (tmp_path / "j1" / "checkpoint.dact").read_bytes()
    ck4 = (tmp_path / "j4" / "checkpoint.dact").read_bytes()
    assert ck1 == ck4
    log1 = (tmp_path / "j1" / "train_log.csv").read_text()
    log4 = (tmp_path / "j4" / "train_log.csv").read_text()
    assert log1 == log4
    report("determinism", "cmd_train with --jobs 1 vs --jobs 4 produced "
                          "identical checkpoints and logs")


def test_latency_ordering_n8_vs_n4(tmp_path):
    outs = {}
    for n in (4, 8):
        out = tmp_path / f"bench{n}"
        _cli("bench", "--out", out, "--n", n, "--videos", "40",
             "--warmup", "5", "--side", "64", "--stages", "8,16,32,64",
             "--classes", "5", "--frames-per-video", "16")
        outs[n] = json.loads((out / "latency.json").read_text())
    assert outs[8]["mean_ms"] >= outs[4]["mean_ms"]
    report("latency ordering",
           f"N=8 mean {outs[8]['mean_ms']:.2f} ms/video >= "
           f"N=4 mean {outs[4]['mean_ms']:.2f} ms/video")


@pytest.fixture(scope="module")
def learning_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("learning") / "corpus"
    config = CorpusConfig(classes=5, subjects=10, videos_per=1, frames=16,
                          side=32)
    manifest = synth_corpus(config, seed=11, out_dir=root)
    flow_params = FlowParams(pyramid_scale=0.75, outer_iters=5, inner_iters=12)
    from dact.flow import write_qflow
    from dact.fusion import flow_path
    from dact.imageops import load_image
    import os
    for seq in restructure(manifest):
        for t in range(len(seq.frames) - 1):
            out_path = flow_path(seq, t, manifest.root)
            os.makedirs(os.path.dirname(out_path), exist_ok=True)
            qf = quantize_flow(estimate_flow(
                load_image(manifest.resolve(seq.frames[t].path)),
                load_image(manifest.resolve(seq.frames[t + 1].path)),
                flow_params))
            write_qflow(out_path, qf)
    return manifest


def test_end_to_end_learning(learning_corpus):
    from dact.sampling import AugmentParams

    sequences = restructure(learning_corpus)
    plan = subject_kfold(sequences, 5, seed=11)
    # augmentation ranges scaled to the 32 px corpus
    augment = AugmentParams(scale_range=(0.9, 1.1),
                            rotation_range_deg=(-10, 10),
                            crop_range=(0.8, 1.0), output_side=32)
    averages = {}
    for m in (0, 1):
        net = NetworkConfig(
            backbone=BackboneConfig(input_channels=3 + 2 * m,
                                    stage_widths=(8, 16, 32, 64),
                                    input_side=32),
            n_groups=4, num_classes=5, dropout=0.3)
        cfg = TrainConfig(batch_size=32, base_lr=0.01,
                          schedule=((250, 10), (350, 10)),
                          total_iterations=400, sampling="segments_random",
                          n_segments=4, flow_frames=m, seed=7)
        store = FlowStore(learning_corpus.root) if m else None
        rep, _ = cross_validate(sequences, plan, cfg, net, augment=augment,
                                flow_store=store, root=learning_corpus.root,
                                jobs=2)
        averages[m] = rep.average_accuracy
        print(f"  m={m}: folds "
              f"{[f'{a:.2f}' for a in rep.fold_accuracies]} "
              f"average {rep.average_accuracy:.3f}")
    assert averages[0] >= 0.85, f"RGB-only average {averages[0]:.3f} < 0.85"
    # 1e-9 absorbs float representation error at the exact 2-point boundary
    assert averages[1] >= averages[0] - 0.02 - 1e-9, \
        f"MFF average {averages[1]:.3f} more than 2 points below " \
        f"RGB {averages[0]:.3f}"
    report("end-to-end learning",
           f"subject-disjoint 5-fold: RGB {averages[0]:.3f} >= 0.85, "
           f"MFF {averages[1]:.3f} >= RGB - 0.02")
