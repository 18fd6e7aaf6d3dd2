"""Integer execution: identity cases, oracle agreement, saturation, accuracy."""

import numpy as np
import pytest

import oracles
from conftest import fresh_ranges
from mcuq import qat
from mcuq.errors import AccumulatorOverflowError, DatasetError
from mcuq.graph_ir import NetworkGraph, validate
from mcuq.inference import (
    evaluate_accuracy,
    per_class_csv,
    run_batch_int,
    run_codes_layer,
    run_network_float,
    run_network_int,
)
from mcuq.memory_model import all_uniform_policy
from mcuq.packed_model import PackedLayer, build_packed_model
from mcuq.quantizer import ActRange, QuantizedTensor, RequantParams, pack_subbyte


def identity_conv_rec(n_ch=1, bits=8):
    """1x1 conv with weight code 1 at scale 1 and unit requant (M = 1)."""
    codes = np.ones((n_ch, n_ch, 1, 1), dtype=np.int64)
    qw = QuantizedTensor(bits=8, packed=pack_subbyte(np.eye(n_ch).reshape(-1), 8,
                                                     signed=True),
                         shape=(n_ch, n_ch, 1, 1), scales=np.ones(n_ch),
                         signed=True)
    rq = RequantParams(multiplier=np.full(n_ch, 1 << 30, dtype=np.int32),
                       shift=np.full(n_ch, 30, dtype=np.int32))
    return PackedLayer(layer_id=1, kind="conv2d", weight_bits=8, out_bits=bits,
                       weight=qw, bias_int=np.zeros(n_ch, dtype=np.int32),
                       requants=(rq,)), codes


def test_identity_conv_passes_codes_through():
    layer = oracles._mk(1, "conv2d", [0], 1, 1, 1, 1, 0, (1, 4, 4), (1, 4, 4),
                        bias=1)
    rec, _ = identity_conv_rec()
    x = np.arange(256, dtype=np.int32).reshape(16, 1, 4, 4)[:16]
    out = run_codes_layer(layer, rec, [x])
    assert np.array_equal(out, x)


def test_identity_conv_full_code_range():
    layer = oracles._mk(1, "conv2d", [0], 1, 1, 1, 1, 0, (1, 16, 16), (1, 16, 16),
                        bias=1)
    rec, _ = identity_conv_rec()
    x = np.arange(256, dtype=np.int32).reshape(1, 1, 16, 16)
    assert np.array_equal(run_codes_layer(layer, rec, [x]), x)


def toy_int_model(toy_graph, weights, ranges, policy=None):
    p = policy or all_uniform_policy(toy_graph)
    return build_packed_model(toy_graph, weights, p, ranges)


def test_zero_image_propagates_biases(toy_graph, pretrained, toy_ranges):
    model = toy_int_model(toy_graph, pretrained[0], toy_ranges)
    zero = np.zeros((1, 28, 28), dtype=np.float32)
    scores, pred = run_network_int(toy_graph, model, zero)
    # walk the oracle over zero input codes: layer 1 sees only its bias
    codes = {0: np.zeros((1, 28, 28), dtype=np.int64)}
    for lid in [1, 2, 3, 4, 5, 6]:
        layer = toy_graph.layer(lid)
        codes[lid] = oracles.ref_layer_codes(
            layer, model.layers[lid], [codes[t] for t in layer.input_ids])
    assert np.array_equal(scores, codes[6].ravel())
    assert pred == int(codes[6].ravel().argmax())


def test_network_codes_match_oracle_per_layer(toy_graph, pretrained, toy_ranges):
    policy = all_uniform_policy(toy_graph)
    policy.weight_bits[3] = 4
    policy.act_bits[2] = 4
    policy.act_bits[4] = 2
    model = toy_int_model(toy_graph, pretrained[0], toy_ranges, policy)
    rng = np.random.default_rng(2)
    from mcuq.quantizer import quantize_act

    img = rng.uniform(0, 1, size=(1, 28, 28)).astype(np.float32)
    codes = {0: quantize_act(img, model.act_clip[0], model.act_bits[0]).astype(np.int64)}
    for lid in [1, 2, 3, 4, 5, 6]:
        layer = toy_graph.layer(lid)
        codes[lid] = oracles.ref_layer_codes(
            layer, model.layers[lid], [codes[t] for t in layer.input_ids])
    scores, _ = run_network_int(toy_graph, model, img)
    assert np.array_equal(scores, codes[6].ravel())


def test_residual_codes_match_oracle(residual_graph):
    weights = qat.init_weights(residual_graph, seed=5)
    ranges = {t: ActRange(tensor_id=t, clip_max=1.5)
              for t in residual_graph.encoded_tensors()}
    model = build_packed_model(residual_graph, weights,
                               all_uniform_policy(residual_graph), ranges)
    rng = np.random.default_rng(3)
    from mcuq.quantizer import quantize_act

    img = rng.uniform(0, 1.5, size=(3, 8, 8)).astype(np.float32)
    codes = {0: quantize_act(img, model.act_clip[0], model.act_bits[0]).astype(np.int64)}
    for lid in [1, 2, 3, 4, 5, 6]:
        layer = residual_graph.layer(lid)
        codes[lid] = oracles.ref_layer_codes(
            layer, model.layers[lid], [codes[t] for t in layer.input_ids])
    scores, _ = run_network_int(residual_graph, model, img)
    assert np.array_equal(scores, codes[6].ravel())


def test_all_codes_stay_in_declared_range(toy_graph, pretrained, toy_ranges):
    # adversarial inputs: far beyond the calibration clip in both directions
    policy = all_uniform_policy(toy_graph)
    policy.act_bits[1] = 2
    policy.act_bits[3] = 2
    model = toy_int_model(toy_graph, pretrained[0], toy_ranges, policy)
    extremes = np.stack([
        np.full((1, 28, 28), 100.0, dtype=np.float32),
        np.full((1, 28, 28), -100.0, dtype=np.float32),
        np.zeros((1, 28, 28), dtype=np.float32),
    ])
    scores = run_batch_int(toy_graph, model, extremes)
    assert scores.dtype == np.int32
    assert np.isfinite(scores.astype(np.float64)).all()


def test_saturation_clamps_not_wraps():
    layer = oracles._mk(1, "conv2d", [0], 1, 1, 1, 1, 0, (1, 2, 2), (1, 2, 2),
                        bias=1)
    rec, _ = identity_conv_rec(bits=8)
    big = np.full((1, 1, 2, 2), 4000, dtype=np.int32)
    out = run_codes_layer(layer, rec, [big])
    assert np.array_equal(out, np.full((1, 1, 2, 2), 255))


def test_int_batch_matches_single(toy_graph, pretrained, toy_ranges, desk_small):
    model = toy_int_model(toy_graph, pretrained[0], toy_ranges)
    imgs = desk_small.images[:6]
    batch = run_batch_int(toy_graph, model, imgs)
    for i in range(6):
        single, _ = run_network_int(toy_graph, model, imgs[i])
        assert np.array_equal(batch[i], single)


def test_int_inference_deterministic(toy_graph, pretrained, toy_ranges, desk_small):
    model = toy_int_model(toy_graph, pretrained[0], toy_ranges)
    a = run_batch_int(toy_graph, model, desk_small.images[:16])
    b = run_batch_int(toy_graph, model, desk_small.images[:16])
    assert np.array_equal(a, b)


def test_int_top1_equals_fake_quant_top1(toy_graph, pretrained, toy_ranges, desk_small):
    """The packed integer path and the fake-quant float path agree on argmax."""
    policy = all_uniform_policy(toy_graph)
    model = toy_int_model(toy_graph, pretrained[0], toy_ranges, policy)
    int_top1, _ = evaluate_accuracy(toy_graph, desk_small, model=model)
    ranges = {t: ActRange(tensor_id=t, clip_max=model.act_clip[t])
              for t in model.act_clip}
    fq_top1, _ = evaluate_accuracy(toy_graph, desk_small, weights=pretrained[0],
                                   policy=policy, ranges=ranges)
    assert int_top1 == pytest.approx(fq_top1, abs=0.02)
    assert int_top1 > 0.8


def test_float_path_matches_training_forward(toy_graph, pretrained, desk_small):
    logits = run_network_float(toy_graph, pretrained[0], desk_small.images[0])
    batch, _ = qat.forward_network(toy_graph, pretrained[0], desk_small.images[:1])
    assert np.allclose(logits, batch[0], atol=1e-6)


def test_overflow_check_flags_int32_excess():
    layer = oracles._mk(1, "fully_connected", [0], 1, 0, 0, 1, 0,
                        (4, 1, 1), (1, 1, 1), bias=1)
    qw = QuantizedTensor(bits=8, packed=pack_subbyte(np.full(4, 127), 8, signed=True),
                         shape=(1, 4), scales=np.ones(1), signed=True)
    rq = RequantParams(multiplier=np.array([1 << 30], dtype=np.int32),
                       shift=np.array([30], dtype=np.int32))
    rec = PackedLayer(layer_id=1, kind="fully_connected", weight_bits=8, out_bits=32,
                      weight=qw, bias_int=np.array([2 ** 31 - 1], dtype=np.int32),
                      requants=(rq,))
    x = np.full((1, 4, 1, 1), 255, dtype=np.int64)
    with pytest.raises(AccumulatorOverflowError):
        run_codes_layer(layer, rec, [x], checked=True)
    # unchecked mode carries on in wider arithmetic
    out = run_codes_layer(layer, rec, [x], checked=False)
    assert out.shape[0] == 1 and out.size == 1


# ---------------------------------------------------------------------------
# Accuracy reporting
# ---------------------------------------------------------------------------

def test_evaluate_accuracy_per_class_rows(toy_graph, pretrained, desk_small):
    top1, rows = evaluate_accuracy(toy_graph, desk_small, weights=pretrained[0])
    assert len(rows) == 10
    assert sum(r["count"] for r in rows) == 120
    agg = sum(r["correct"] for r in rows) / sum(r["count"] for r in rows)
    assert top1 == pytest.approx(agg, abs=1e-9)


def test_per_class_csv_format():
    rows = [{"class": 0, "count": 5, "correct": 4, "top1": 0.8}]
    text = per_class_csv(rows)
    lines = text.strip().splitlines()
    assert lines[0] == "class,count,correct,top1"
    assert lines[1] == "0,5,4,0.8"


def test_empty_split_raises(toy_graph, pretrained):
    imgs = np.zeros((4, 1, 28, 28), dtype=np.float32)
    labels = np.zeros(4, dtype=np.int64)
    from mcuq.data import Dataset

    d = Dataset(images=imgs, labels=labels, n_train=3)
    d.n_train = 4  # fake an empty val view after construction
    with pytest.raises(DatasetError):
        evaluate_accuracy(toy_graph, d, weights=pretrained[0], split="val")
