"""Quantization-aware training engine.

Pure numpy forward/backward for the supported layer kinds. Weights train
through a straight-through estimator over the per-channel fake-quantizer;
activation clips train with PACT-style gradients (pass-through inside the
clip window, unit gradient to the clip where the input saturates).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import Dataset
from .errors import PolicyError, TrainingDivergedError
from .graph_ir import WEIGHTED_KINDS, NetworkGraph, topo_order
from .quantizer import ActRange, fake_quant_weights, round_half_away

# kinds whose float-mode output passes through a plain ReLU
_RELU_KINDS = WEIGHTED_KINDS + ("relu_clip",)

CKPT_MAGIC = b"MQC1"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip_floor: float = 1e-3  # learned clips never drop below this
    log_every: int = 0        # epochs between stdout lines, 0 = silent


def init_weights(g: NetworkGraph, seed: int = 0) -> dict[int, dict[str, np.ndarray]]:
    """He-initialized float32 weights and zero biases for every weighted layer."""
    rng = np.random.default_rng(seed)
    weights = {}
    for layer in g.weighted_layers():
        if layer.kind == "conv2d":
            shape = (layer.out_channels, layer.in_channels, layer.kernel_h, layer.kernel_w)
            fan_in = layer.in_channels * layer.kernel_h * layer.kernel_w
        elif layer.kind == "depthwise_conv2d":
            shape = (layer.out_channels, layer.kernel_h, layer.kernel_w)
            fan_in = layer.kernel_h * layer.kernel_w
        elif layer.kind == "pointwise_conv2d":
            shape = (layer.out_channels, layer.in_channels)
            fan_in = layer.in_channels
        else:  # fc
            c, h, w = layer.input_shape
            shape = (layer.out_channels, c * h * w)
            fan_in = c * h * w
        std = float(np.sqrt(2.0 / fan_in))
        weights[layer.id] = {
            "w": rng.normal(0.0, std, size=shape).astype(np.float32),
            "b": np.zeros(layer.out_channels, dtype=np.float32),
        }
    return weights


def copy_weights(weights: dict) -> dict:
    return {lid: {k: v.copy() for k, v in entry.items()} for lid, entry in weights.items()}


# ---------------------------------------------------------------------------
# Layer ops
# ---------------------------------------------------------------------------

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(x: np.ndarray, kh: int, kw: int, s: int, p: int) -> np.ndarray:
    """(N, C, OH, OW, kh, kw) view of all stride-s windows of the padded input."""
    xp = _pad(x, p)
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]


def _scatter_windows(dwin: np.ndarray, x_shape: tuple, kh: int, kw: int,
                     s: int, p: int) -> np.ndarray:
    """Adjoint of _windows: scatter-add window grads back onto the input."""
    n, c, h, w = x_shape
    oh, ow = dwin.shape[2], dwin.shape[3]
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dwin[:, :, :, :, i, j]
    return dxp[:, :, p:p + h, p:p + w] if p else dxp


def _conv2d_fwd(x, w, b, layer):
    win = _windows(x, layer.kernel_h, layer.kernel_w, layer.stride, layer.padding)
    n, _, oh, ow = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, -1, oh * ow)
    w2 = w.reshape(w.shape[0], -1)
    out = np.einsum("of,nfl->nol", w2, cols, optimize=True)
    out = out.reshape(n, w.shape[0], oh, ow) + b[None, :, None, None]
    return out, cols


def _conv2d_bwd(dy, cols, w, x_shape, layer):
    n, cout, oh, ow = dy.shape
    dyf = dy.reshape(n, cout, oh * ow)
    w2 = w.reshape(cout, -1)
    dw = np.einsum("nol,nfl->of", dyf, cols, optimize=True).reshape(w.shape)
    db = dyf.sum(axis=(0, 2))
    dcols = np.einsum("of,nol->nfl", w2, dyf, optimize=True)
    kh, kw = layer.kernel_h, layer.kernel_w
    dwin = dcols.reshape(n, x_shape[1], kh, kw, oh, ow).transpose(0, 1, 4, 5, 2, 3)
    dx = _scatter_windows(dwin, x_shape, kh, kw, layer.stride, layer.padding)
    return dx, dw, db


def _depthwise_fwd(x, w, b, layer):
    win = _windows(x, layer.kernel_h, layer.kernel_w, layer.stride, layer.padding)
    n, c, oh, ow = win.shape[:4]
    cols = win.reshape(n, c, oh * ow, -1)  # (N, C, L, kh*kw)
    w2 = w.reshape(c, -1)
    out = np.einsum("cf,nclf->ncl", w2, cols, optimize=True)
    out = out.reshape(n, c, oh, ow) + b[None, :, None, None]
    return out, cols


def _depthwise_bwd(dy, cols, w, x_shape, layer):
    n, c, oh, ow = dy.shape
    dyf = dy.reshape(n, c, oh * ow)
    w2 = w.reshape(c, -1)
    dw = np.einsum("ncl,nclf->cf", dyf, cols, optimize=True).reshape(w.shape)
    db = dyf.sum(axis=(0, 2))
    dcols = np.einsum("cf,ncl->nclf", w2, dyf, optimize=True)
    kh, kw = layer.kernel_h, layer.kernel_w
    dwin = dcols.reshape(n, c, oh, ow, kh, kw)
    dx = _scatter_windows(dwin, x_shape, kh, kw, layer.stride, layer.padding)
    return dx, dw, db


def _avgpool_fwd(x, layer):
    win = _windows(x, layer.kernel_h, layer.kernel_w, layer.stride, layer.padding)
    return win.mean(axis=(4, 5))


def _avgpool_bwd(dy, x_shape, layer):
    kh, kw = layer.kernel_h, layer.kernel_w
    dwin = np.broadcast_to((dy / (kh * kw))[:, :, :, :, None, None],
                           dy.shape + (kh, kw))
    return _scatter_windows(dwin, x_shape, kh, kw, layer.stride, layer.padding)


# ---------------------------------------------------------------------------
# Network forward/backward
# ---------------------------------------------------------------------------

def _fake_quant_act_cached(x, clip_max, bits):
    """fake_quant_act plus the masks the backward pass needs."""
    scale = clip_max / ((1 << bits) - 1)
    over = x >= clip_max
    inside = (x > 0) & ~over
    xc = np.clip(x, 0.0, clip_max)
    y = round_half_away(xc / scale) * scale
    return y.astype(np.float32), inside, over


def forward_network(g: NetworkGraph, weights: dict, x: np.ndarray,
                    policy=None, ranges: dict[int, ActRange] | None = None,
                    train: bool = False):
    """Run the network on a batch.

    With policy=None this is the plain float model (ReLU after weighted
    layers). With a policy, weights are fake-quantized per channel and every
    encoded tensor is clipped/rounded at its configured width; 32-bit entries
    fall back to the float behavior. Returns (logits, cache); cache is None
    unless train=True.
    """
    encoded = set(g.encoded_tensors())
    order = [g.layer(i) for i in topo_order(g)]
    acts: dict[int, np.ndarray] = {}
    cache = [] if train else None
    logits = None

    for layer in order:
        if layer.kind == "output":
            logits = acts[layer.input_ids[0]]
            continue
        entry = {"layer": layer}

        if layer.kind == "input":
            z = x.astype(np.float32)
        elif layer.kind in WEIGHTED_KINDS:
            xin = acts[layer.input_ids[0]]
            w = weights[layer.id]["w"]
            b = weights[layer.id]["b"]
            wbits = 32 if policy is None else policy.weight_bits[layer.id]
            wq = w if wbits == 32 else fake_quant_weights(w, wbits).astype(np.float32)
            if layer.kind == "conv2d":
                z, cols = _conv2d_fwd(xin, wq, b, layer)
                entry.update(cols=cols, x_shape=xin.shape)
            elif layer.kind == "depthwise_conv2d":
                z, cols = _depthwise_fwd(xin, wq, b, layer)
                entry.update(cols=cols, x_shape=xin.shape)
            elif layer.kind == "pointwise_conv2d":
                z = np.einsum("oc,nchw->nohw", wq, xin, optimize=True) + b[None, :, None, None]
                entry.update(x_in=xin)
            else:  # fc
                x2 = xin.reshape(len(xin), -1)
                z = x2 @ wq.T + b
                entry.update(x_in=x2, x_shape=xin.shape)
            entry.update(wq=wq)
        elif layer.kind == "avg_pool":
            xin = acts[layer.input_ids[0]]
            z = _avgpool_fwd(xin, layer)
            entry.update(x_shape=xin.shape)
        elif layer.kind == "add_residual":
            z = acts[layer.input_ids[0]] + acts[layer.input_ids[1]]
        elif layer.kind == "relu_clip":
            z = acts[layer.input_ids[0]]
        else:
            raise PolicyError(f"cannot execute layer kind {layer.kind!r}")

        # output encoding: fake-quant when configured, else the float nonlinearity
        tid = layer.id
        bits = 32
        if policy is not None and tid in encoded:
            bits = policy.act_bits.get(tid, 32)
        if bits != 32:
            if ranges is None or tid not in ranges:
                raise PolicyError(f"no activation range for tensor {tid}")
            y, inside, over = _fake_quant_act_cached(z, ranges[tid].clip_max, bits)
            entry.update(act_inside=inside, act_over=over, act_tid=tid)
        elif layer.kind in _RELU_KINDS and tid in encoded:
            y = np.maximum(z, 0.0)
            entry.update(relu_mask=z > 0)
        else:
            y = z
        acts[tid] = y
        if train:
            cache.append(entry)

    if logits is None:
        raise PolicyError("graph has no output layer")
    return (logits.astype(np.float32), cache) if train else (logits.astype(np.float32), None)


def backward_network(g: NetworkGraph, weights: dict, cache: list,
                     dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Grads for weights, biases, and activation clips given dL/dlogits."""
    grads: dict[str, np.ndarray] = {}
    dacts: dict[int, np.ndarray] = {}
    out_layer = g.output_layer
    dacts[out_layer.input_ids[0]] = dlogits.astype(np.float32)

    for entry in reversed(cache):
        layer = entry["layer"]
        dy = dacts.pop(layer.id, None)
        if dy is None:
            continue
        # back through the output encoding
        if "act_tid" in entry:
            sat = dy * entry["act_over"]
            grads_key = f"clip.{entry['act_tid']}"
            grads[grads_key] = grads.get(grads_key, 0.0) + float(sat.sum())
            dz = dy * entry["act_inside"]
        elif "relu_mask" in entry:
            dz = dy * entry["relu_mask"]
        else:
            dz = dy

        if layer.kind == "input":
            continue
        if layer.kind in WEIGHTED_KINDS:
            wq = entry["wq"]
            if layer.kind == "conv2d":
                dx, dw, db = _conv2d_bwd(dz, entry["cols"], wq, entry["x_shape"], layer)
            elif layer.kind == "depthwise_conv2d":
                dx, dw, db = _depthwise_bwd(dz, entry["cols"], wq, entry["x_shape"], layer)
            elif layer.kind == "pointwise_conv2d":
                dw = np.einsum("nohw,nchw->oc", dz, entry["x_in"], optimize=True)
                db = dz.sum(axis=(0, 2, 3))
                dx = np.einsum("oc,nohw->nchw", wq, dz, optimize=True)
            else:  # fc
                dw = dz.T @ entry["x_in"]
                db = dz.sum(axis=0)
                dx = (dz @ wq).reshape(entry["x_shape"])
            grads[f"w.{layer.id}"] = dw  # STE: latent weight takes the fake-quant grad
            grads[f"b.{layer.id}"] = db
            src = layer.input_ids[0]
            dacts[src] = dacts.get(src, 0.0) + dx
        elif layer.kind == "avg_pool":
            dx = _avgpool_bwd(dz, entry["x_shape"], layer)
            src = layer.input_ids[0]
            dacts[src] = dacts.get(src, 0.0) + dx
        elif layer.kind == "add_residual":
            for src in layer.input_ids:
                dacts[src] = dacts.get(src, 0.0) + dz
        elif layer.kind == "relu_clip":
            src = layer.input_ids[0]
            dacts[src] = dacts.get(src, 0.0) + dz
    return grads


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and dL/dlogits for integer class labels."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.log(np.maximum(p[np.arange(n), labels], 1e-12)).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for key, gval in grads.items():
            gval = np.asarray(gval, dtype=np.float64)
            if key not in self.m:
                self.m[key] = np.zeros_like(gval)
                self.v[key] = np.zeros_like(gval)
            self.m[key] = c.beta1 * self.m[key] + (1 - c.beta1) * gval
            self.v[key] = c.beta2 * self.v[key] + (1 - c.beta2) * gval * gval
            update = c.lr * (self.m[key] / bc1) / (np.sqrt(self.v[key] / bc2) + c.eps)
            params[key] = (params[key] - update).astype(params[key].dtype) \
                if isinstance(params[key], np.ndarray) else float(params[key] - update)


def _gather_params(weights: dict, ranges: dict[int, ActRange] | None):
    params: dict = {}
    for lid, entry in weights.items():
        params[f"w.{lid}"] = entry["w"]
        params[f"b.{lid}"] = entry["b"]
    if ranges:
        for tid, r in ranges.items():
            params[f"clip.{tid}"] = r.clip_max
    return params


def _scatter_params(params: dict, weights: dict, ranges: dict[int, ActRange] | None,
                    clip_floor: float):
    for lid, entry in weights.items():
        entry["w"] = params[f"w.{lid}"]
        entry["b"] = params[f"b.{lid}"]
    if ranges:
        for tid, r in ranges.items():
            r.clip_max = max(float(params[f"clip.{tid}"]), clip_floor)
            params[f"clip.{tid}"] = r.clip_max


def train_network(g: NetworkGraph, weights: dict, dataset: Dataset,
                  cfg: TrainConfig, policy=None,
                  ranges: dict[int, ActRange] | None = None) -> list[dict]:
    """SGD loop (Adam) over the train split; mutates weights and ranges.

    Float training when policy is None, fake-quant training otherwise.
    Returns one history record per epoch. Raises TrainingDivergedError on a
    non-finite loss.
    """
    images, labels = dataset.train
    n = len(images)
    rng = np.random.default_rng(cfg.seed)
    opt = _Adam(cfg)
    params = _gather_params(weights, ranges)
    history = []

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            logits, cache = forward_network(g, weights, images[idx], policy=policy,
                                            ranges=ranges, train=True)
            loss, dlogits = softmax_xent(logits, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}")
            grads = backward_network(g, weights, cache, dlogits)
            opt.step(params, grads)
            _scatter_params(params, weights, ranges, cfg.clip_floor)
            losses.append(loss)
        val_top1 = evaluate(g, weights, dataset, split="val", policy=policy, ranges=ranges)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_top1": val_top1})
        if cfg.log_every and (epoch % cfg.log_every == 0 or epoch == cfg.epochs - 1):
            print(f"epoch {epoch}: loss {history[-1]['loss']:.4f} val_top1 {val_top1:.4f}")
    return history


def pretrain_float(g: NetworkGraph, dataset: Dataset, cfg: TrainConfig) -> tuple[dict, list]:
    weights = init_weights(g, seed=cfg.seed)
    history = train_network(g, weights, dataset, cfg)
    return weights, history


def train_qat(g: NetworkGraph, weights: dict, policy, ranges: dict[int, ActRange],
              dataset: Dataset, cfg: TrainConfig):
    """Fake-quant training under a policy; returns (weights, ranges, val_top1).

    Zero epochs leaves the parameters untouched and just scores the
    calibrated model.
    """
    train_network(g, weights, dataset, cfg, policy=policy, ranges=ranges)
    top1 = evaluate(g, weights, dataset, split="val", policy=policy, ranges=ranges)
    return weights, ranges, top1


def finetune(g: NetworkGraph, weights: dict, policy, ranges: dict[int, ActRange],
             dataset: Dataset, cfg: TrainConfig):
    """Long QAT pass over the chosen policy (the deployment-model trainer)."""
    return train_qat(g, weights, policy, ranges, dataset, cfg)


def evaluate(g: NetworkGraph, weights: dict, dataset: Dataset, split: str = "val",
             policy=None, ranges=None, batch: int = 256) -> float:
    """Top-1 accuracy on a split ("val", "train", or "all")."""
    if split == "val":
        images, labels = dataset.val
    elif split == "train":
        images, labels = dataset.train
    else:
        images, labels = dataset.images, dataset.labels
    correct = 0
    for start in range(0, len(images), batch):
        logits, _ = forward_network(g, weights, images[start:start + batch],
                                    policy=policy, ranges=ranges)
        correct += int((logits.argmax(axis=1) == labels[start:start + batch]).sum())
    return correct / len(images)


def collect_activations(g: NetworkGraph, weights: dict, images: np.ndarray,
                        batch: int = 128) -> dict[int, np.ndarray]:
    """Float-forward values of every encoded tensor, for range calibration."""
    encoded = set(g.encoded_tensors())
    order = [g.layer(i) for i in topo_order(g)]
    samples: dict[int, list] = {t: [] for t in encoded}
    for start in range(0, len(images), batch):
        chunk = images[start:start + batch]
        acts: dict[int, np.ndarray] = {}
        for layer in order:
            if layer.kind == "output":
                continue
            if layer.kind == "input":
                z = chunk.astype(np.float32)
            elif layer.kind in WEIGHTED_KINDS:
                xin = acts[layer.input_ids[0]]
                w, b = weights[layer.id]["w"], weights[layer.id]["b"]
                if layer.kind == "conv2d":
                    z, _ = _conv2d_fwd(xin, w, b, layer)
                elif layer.kind == "depthwise_conv2d":
                    z, _ = _depthwise_fwd(xin, w, b, layer)
                elif layer.kind == "pointwise_conv2d":
                    z = np.einsum("oc,nchw->nohw", w, xin, optimize=True) + b[None, :, None, None]
                else:
                    z = xin.reshape(len(xin), -1) @ w.T + b
            elif layer.kind == "avg_pool":
                z = _avgpool_fwd(acts[layer.input_ids[0]], layer)
            elif layer.kind == "add_residual":
                z = acts[layer.input_ids[0]] + acts[layer.input_ids[1]]
            else:  # relu_clip
                z = acts[layer.input_ids[0]]
            if layer.kind in _RELU_KINDS and layer.id in encoded:
                z = np.maximum(z, 0.0)
            acts[layer.id] = z
            if layer.id in encoded:
                samples[layer.id].append(z.ravel())
        del acts
    return {t: np.concatenate(v) for t, v in samples.items()}


# ---------------------------------------------------------------------------
# Checkpoints: flat binary, deterministic byte-for-byte for a given state.
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, weights: dict, ranges: dict[int, ActRange] | None = None):
    entries: dict[str, np.ndarray] = {}
    for lid, entry in weights.items():
        entries[f"w.{lid}"] = np.asarray(entry["w"], dtype=np.float32)
        entries[f"b.{lid}"] = np.asarray(entry["b"], dtype=np.float32)
    for tid, r in (ranges or {}).items():
        entries[f"clip.{tid}"] = np.asarray([r.clip_max], dtype=np.float32)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(entries)))
        for key in sorted(entries):
            arr = entries[key]
            kb = key.encode("utf-8")
            f.write(struct.pack("<H", len(kb)))
            f.write(kb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[int, ActRange]]:
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        weights: dict[int, dict[str, np.ndarray]] = {}
        ranges: dict[int, ActRange] = {}
        for _ in range(count):
            (klen,) = struct.unpack("<H", f.read(2))
            key = f.read(klen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            arr = np.frombuffer(f.read(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
            tag, ident = key.split(".", 1)
            if tag == "clip":
                ranges[int(ident)] = ActRange(tensor_id=int(ident), clip_max=float(arr[0]))
            else:
                weights.setdefault(int(ident), {})[tag] = arr.copy()
    return weights, ranges
