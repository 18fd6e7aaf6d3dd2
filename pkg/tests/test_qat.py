"""Training loop: forward/backward, Adam, fake-quant training, checkpoints."""

import numpy as np
import pytest

import oracles
from conftest import fresh_ranges
from mcuq import qat
from mcuq.data import Dataset, synthetic_shapes
from mcuq.errors import TrainingDivergedError
from mcuq.graph_ir import NetworkGraph, validate
from mcuq.memory_model import all_uniform_policy
from mcuq.quantizer import ActRange


def tiny_fc_graph(cin=2, classes=3):
    layers = (
        oracles._mk(0, "input", [], cin, 0, 0, 1, 0, (cin, 1, 1), (cin, 1, 1)),
        oracles._mk(1, "fully_connected", [0], classes, 0, 0, 1, 0,
                    (cin, 1, 1), (classes, 1, 1), bias=classes),
        oracles._mk(2, "output", [1], classes, 0, 0, 1, 0,
                    (classes, 1, 1), (classes, 1, 1)),
    )
    return validate(NetworkGraph(layers=layers, resolution=1, width_multiplier=1.0))


# ---------------------------------------------------------------------------
# Initialization and plumbing
# ---------------------------------------------------------------------------

def test_init_weights_shapes_and_determinism(toy_graph):
    a = qat.init_weights(toy_graph, seed=4)
    b = qat.init_weights(toy_graph, seed=4)
    c = qat.init_weights(toy_graph, seed=5)
    assert sorted(a) == [1, 2, 3, 4, 6]
    assert a[1]["w"].shape == (4, 1, 3, 3)
    assert a[6]["w"].shape == (10, 32)
    assert not a[3]["b"].any()
    for lid in a:
        assert np.array_equal(a[lid]["w"], b[lid]["w"])
    assert not np.array_equal(a[1]["w"], c[1]["w"])


def test_copy_weights_is_deep(toy_graph):
    w = qat.init_weights(toy_graph)
    w2 = qat.copy_weights(w)
    w2[1]["w"][0, 0, 0, 0] += 1.0
    assert w[1]["w"][0, 0, 0, 0] != w2[1]["w"][0, 0, 0, 0]


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def test_forward_fc_hand_case():
    g = tiny_fc_graph()
    weights = {1: {"w": np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 0.5]],
                                 dtype=np.float32),
                   "b": np.array([0.1, 0.2, -0.3], dtype=np.float32)}}
    x = np.array([[[[0.5]], [[2.0]]]], dtype=np.float32)  # (1, 2, 1, 1)
    logits, _ = qat.forward_network(g, weights, x)
    want = np.array([0.5 + 4.0 + 0.1, -2.0 + 0.2, 1.5 + 1.0 - 0.3])
    assert np.allclose(logits[0], want, atol=1e-6)


def test_forward_avgpool_and_relu(toy_graph, pretrained, desk_small):
    weights, _ = pretrained
    logits, _ = qat.forward_network(toy_graph, weights, desk_small.images[:4])
    assert logits.shape == (4, 10)
    assert np.isfinite(logits).all()


def test_forward_residual_add(residual_graph):
    weights = qat.init_weights(residual_graph, seed=1)
    x = np.random.default_rng(0).uniform(0, 1, size=(2, 3, 8, 8)).astype(np.float32)
    logits, _ = qat.forward_network(residual_graph, weights, x)
    assert logits.shape == (2, 5)
    assert np.isfinite(logits).all()


def test_softmax_xent_hand_case():
    logits = np.array([[1.0, 2.0, 3.0]])
    labels = np.array([2])
    loss, grad = qat.softmax_xent(logits, labels)
    z = np.exp(logits[0] - 3.0)
    p = z / z.sum()
    assert loss == pytest.approx(-np.log(p[2]), rel=1e-6)
    want = (p - np.array([0.0, 0.0, 1.0])) / 1.0
    assert np.allclose(grad[0], want, atol=1e-7)


def test_softmax_xent_gradient_fd():
    rng = np.random.default_rng(13)
    logits = rng.normal(size=(4, 6))
    labels = rng.integers(0, 6, size=4)

    def f():
        l, _ = qat.softmax_xent(logits, labels)
        return l

    _, grad = qat.softmax_xent(logits, labels)
    fd = oracles.fd_grad(f, logits, list(range(24)), eps=1e-6)
    for i, v in fd.items():
        assert grad.ravel()[i] == pytest.approx(v, abs=1e-5)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_single_step_hand():
    cfg = qat.TrainConfig(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    opt = qat._Adam(cfg)
    p = {"x": np.array([1.0])}
    g = {"x": np.array([0.5])}
    opt.step(p, g)
    m = 0.1 * 0.5
    v = 0.001 * 0.25
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    want = 1.0 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
    assert p["x"][0] == pytest.approx(want, rel=1e-12)


def test_adam_defaults_match_contract():
    cfg = qat.TrainConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) == (1e-4, 0.9, 0.999, 1e-8)
    assert cfg.batch_size == 32


# ---------------------------------------------------------------------------
# Training behavior
# ---------------------------------------------------------------------------

def test_zero_epochs_is_identity(toy_graph, desk_small):
    weights = qat.init_weights(toy_graph, seed=0)
    before = qat.copy_weights(weights)
    hist = qat.train_network(toy_graph, weights, desk_small,
                             qat.TrainConfig(epochs=0))
    assert hist == []
    for lid in weights:
        assert np.array_equal(weights[lid]["w"], before[lid]["w"])


def test_train_qat_zero_epochs_scores_only(toy_graph, desk_small, pretrained,
                                           toy_ranges):
    weights = qat.copy_weights(pretrained[0])
    ranges = fresh_ranges(toy_ranges)
    p = all_uniform_policy(toy_graph)
    w, r, top1 = qat.train_qat(toy_graph, weights, p, ranges, desk_small,
                               qat.TrainConfig(epochs=0))
    assert 0.0 <= top1 <= 1.0
    assert all(np.array_equal(w[l]["w"], pretrained[0][l]["w"]) for l in w)


def test_loss_decreases_over_first_epochs(toy_graph, desk, pretrained, toy_ranges):
    weights = qat.copy_weights(pretrained[0])
    ranges = fresh_ranges(toy_ranges)
    p = all_uniform_policy(toy_graph)
    cfg = qat.TrainConfig(epochs=2, lr=1e-4, seed=3)
    hist = qat.train_network(toy_graph, weights, desk, cfg, policy=p, ranges=ranges)
    assert hist[1]["loss"] < hist[0]["loss"]


def test_qat_all8_recovers_float_accuracy(toy_graph, desk, pretrained, toy_ranges):
    weights = qat.copy_weights(pretrained[0])
    ranges = fresh_ranges(toy_ranges)
    p = all_uniform_policy(toy_graph)
    cfg = qat.TrainConfig(epochs=3, lr=1e-4, seed=0)
    _, _, top1 = qat.train_qat(toy_graph, weights, p, ranges, desk, cfg)
    assert top1 >= 0.90


def test_training_is_deterministic(toy_graph, desk_small, toy_ranges, pretrained):
    runs = []
    for _ in range(2):
        weights = qat.copy_weights(pretrained[0])
        ranges = fresh_ranges(toy_ranges)
        cfg = qat.TrainConfig(epochs=1, lr=1e-4, seed=7)
        qat.train_network(toy_graph, weights, desk_small, cfg,
                          policy=all_uniform_policy(toy_graph), ranges=ranges)
        runs.append((weights, ranges))
    for lid in runs[0][0]:
        assert np.array_equal(runs[0][0][lid]["w"], runs[1][0][lid]["w"])
        assert np.array_equal(runs[0][0][lid]["b"], runs[1][0][lid]["b"])
    for t in runs[0][1]:
        assert runs[0][1][t].clip_max == runs[1][1][t].clip_max


def test_pact_clips_move_and_respect_floor(toy_graph, desk_small, pretrained,
                                           toy_ranges):
    weights = qat.copy_weights(pretrained[0])
    ranges = fresh_ranges(toy_ranges)
    before = {t: r.clip_max for t, r in ranges.items()}
    cfg = qat.TrainConfig(epochs=1, lr=1e-2, seed=0)
    qat.train_network(toy_graph, weights, desk_small, cfg,
                      policy=all_uniform_policy(toy_graph), ranges=ranges)
    assert any(ranges[t].clip_max != before[t] for t in ranges)
    assert all(r.clip_max >= cfg.clip_floor for r in ranges.values())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    g = tiny_fc_graph()
    weights = qat.init_weights(g, seed=0)
    weights[1]["w"][:] = np.inf
    imgs = np.random.default_rng(0).uniform(size=(8, 2, 1, 1)).astype(np.float32)
    d = Dataset(images=imgs, labels=np.zeros(8, dtype=np.int64), n_train=6)
    with pytest.raises(TrainingDivergedError):
        qat.train_network(g, weights, d, qat.TrainConfig(epochs=1, batch_size=4))


def test_float_training_memorizes_tiny_set(toy_graph):
    d = synthetic_shapes(20, 8, seed=3)
    weights = qat.init_weights(toy_graph, seed=0)
    cfg = qat.TrainConfig(epochs=60, lr=1e-2, batch_size=8, seed=0)
    qat.train_network(toy_graph, weights, d, cfg)
    assert qat.evaluate(toy_graph, weights, d, split="train") == 1.0


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, toy_graph, toy_ranges, pretrained):
    weights = pretrained[0]
    path = str(tmp_path / "w.ckpt")
    qat.save_checkpoint(path, weights, toy_ranges)
    w2, r2 = qat.load_checkpoint(path)
    assert sorted(w2) == sorted(weights)
    for lid in weights:
        assert np.array_equal(w2[lid]["w"], weights[lid]["w"])
        assert np.array_equal(w2[lid]["b"], weights[lid]["b"])
    assert sorted(r2) == sorted(toy_ranges)
    for t in toy_ranges:
        assert r2[t].clip_max == np.float32(toy_ranges[t].clip_max)


def test_checkpoint_without_ranges(tmp_path, toy_graph):
    weights = qat.init_weights(toy_graph)
    path = str(tmp_path / "w.ckpt")
    qat.save_checkpoint(path, weights)
    _, ranges = qat.load_checkpoint(path)
    assert ranges == {}


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ValueError):
        qat.load_checkpoint(str(p))


def test_checkpoint_rejects_wrong_version(tmp_path, toy_graph):
    path = tmp_path / "w.ckpt"
    qat.save_checkpoint(str(path), qat.init_weights(toy_graph))
    blob = bytearray(path.read_bytes())
    blob[4] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        qat.load_checkpoint(str(path))


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def test_evaluate_splits(toy_graph, pretrained, desk_small):
    weights, _ = pretrained
    tr = qat.evaluate(toy_graph, weights, desk_small, split="train")
    va = qat.evaluate(toy_graph, weights, desk_small, split="val")
    al = qat.evaluate(toy_graph, weights, desk_small, split="all")
    n_tr, n_va = desk_small.n_train, len(desk_small) - desk_small.n_train
    want = (tr * n_tr + va * n_va) / (n_tr + n_va)
    assert al == pytest.approx(want, abs=1e-9)


def test_collect_activations_covers_encoded(toy_graph, pretrained, desk_small):
    weights, _ = pretrained
    acts = qat.collect_activations(toy_graph, weights, desk_small.images[:32])
    assert sorted(acts) == toy_graph.encoded_tensors()
    assert all(v.size > 0 for v in acts.values())
