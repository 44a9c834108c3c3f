"""Spike-count readout loss, surrogate-gradient BPTT and the optimizer."""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import LayerTrace, LifLayer, LifParams, Network, SpikeTrain, network_forward, surrogate_grad
from .errors import ContractError, DataError, NumericError


@dataclass(frozen=True)
class OptimizerConfig:
    eta: float = 1e-3
    kind: str = "adam"  # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        # eta == 0 is allowed: it turns an update into a no-op
        if not (np.isfinite(self.eta) and self.eta >= 0):
            raise ContractError(f"learning rate must be finite and non-negative, got {self.eta}")
        if self.kind not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")


@dataclass
class LossReport:
    loss: float
    counts: np.ndarray  # per-class spike counts, (C,) or (B, C)
    prediction: object  # int, or (B,) array for a batch
    grad: np.ndarray  # d loss / d counts, same shape as counts


def readout_loss(output, label, scale=1.0) -> LossReport:
    """Cross-entropy of ``softmax(counts * scale)`` against ``label``.

    ``output`` is a single ``(T, C)`` train or a batch ``(B, T, C)``; for a
    batch the loss and its gradient are averaged over samples. Predictions are
    the argmax of the counts, ties going to the lowest index.
    """
    data = output.data if isinstance(output, SpikeTrain) else np.asarray(output)
    single = data.ndim == 2
    counts = data.sum(axis=-2, dtype=float)
    labels = np.atleast_1d(np.asarray(label))
    c2 = counts[None] if single else counts
    n_classes = c2.shape[1]
    if labels.shape[0] != c2.shape[0]:
        raise ContractError("one label per sample is required")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ContractError(f"label outside 0..{n_classes - 1}")
    logits = c2 * scale
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    losses = log_z - shifted[rows, labels]
    probs = np.exp(shifted - log_z[:, None])
    probs[rows, labels] -= 1.0
    grad = probs * (scale / len(labels))
    pred = np.argmax(c2, axis=1)
    if single:
        return LossReport(float(losses[0]), counts, int(pred[0]), grad[0])
    return LossReport(float(losses.mean()), counts, pred, grad)


@dataclass
class GradientSet:
    """Weight gradients per layer (list position i is layer i+1)."""

    dw: list
    dv: list

    @classmethod
    def zeros_like(cls, net: Network):
        return cls([np.zeros_like(l.w) for l in net.layers], [np.zeros_like(l.v) for l in net.layers])

    def is_finite(self):
        return all(np.all(np.isfinite(g)) for g in self.dw + self.dv)


def bptt_backward(net: Network, traces, loss_grad, first_learning_layer=1) -> GradientSet:
    """Reverse-time gradients for layers ``>= first_learning_layer``.

    ``traces`` come from the matching forward pass and must end at the output
    layer; ``loss_grad`` is d loss / d spike count, shape ``(B, C)``. The spike
    derivative is replaced by ``surrogate_grad(v_mem - v_thr)``. The reset path
    ``v = u (1 - s) + v_rst s`` is differentiated too, so on the smooth proxy
    network this is the exact gradient.
    """
    by_index = {tr.index: tr for tr in traces}
    if not 1 <= first_learning_layer <= net.depth:
        raise ContractError(f"first_learning_layer {first_learning_layer} outside 1..{net.depth}")
    needed = range(first_learning_layer, net.depth + 1)
    if any(j not in by_index for j in needed):
        raise ContractError(f"traces must cover layers {first_learning_layer}..{net.depth}")
    grads = GradientSet.zeros_like(net)
    out_tr = by_index[net.depth]
    g = np.asarray(loss_grad, dtype=float)
    if g.ndim == 1:
        g = g[None]
    batch, timesteps = out_tr.v_mem.shape[:2]
    if g.shape != (batch, net.layer(net.depth).out_width):
        raise ContractError(f"loss gradient shape {g.shape} does not match the output trace")
    ext = np.broadcast_to(g[:, None, :], out_tr.v_mem.shape)

    for j in reversed(needed):
        layer = net.layer(j)
        tr = by_index[j]
        if tr.v_mem.shape != (batch, timesteps, layer.out_width) or tr.inputs.shape[2] != layer.in_width:
            raise ContractError(f"trace for layer {j} does not match the layer's shape")
        p = layer.params
        sg = surrogate_grad(tr.v_mem - tr.v_thr[:, :, None], p.surrogate_slope)
        reset_gain = p.v_rst - tr.v_mem
        keep = 1.0 - tr.spikes
        v_t = layer.v.T
        gu_all = np.empty_like(tr.v_mem)
        g_mem = np.zeros((batch, layer.out_width))
        gu_next = np.zeros((batch, layer.out_width))
        for t in range(timesteps - 1, -1, -1):
            gs = ext[:, t] + g_mem * reset_gain[:, t]
            if layer.recurrent:
                gs = gs + gu_next @ v_t
            gu = gs * sg[:, t] + g_mem * keep[:, t]
            gu_all[:, t] = gu
            g_mem = p.beta * gu
            gu_next = gu
        grads.dw[j - 1] = tr.inputs.reshape(-1, layer.in_width).T @ gu_all.reshape(-1, layer.out_width)
        if layer.recurrent and timesteps > 1:
            prev = tr.spikes[:, :-1].reshape(-1, layer.out_width)
            grads.dv[j - 1] = prev.T @ gu_all[:, 1:].reshape(-1, layer.out_width)
        if j > first_learning_layer:
            ext = gu_all @ layer.w.T
    return grads


class Optimizer:
    """Plain SGD or Adam over the non-frozen layers of one network."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.step_count = 0
        self.m = {}
        self.s = {}

    def _moments(self, key, shape):
        if key not in self.m:
            self.m[key] = np.zeros(shape)
            self.s[key] = np.zeros(shape)
        return self.m[key], self.s[key]

    def update(self, key, param, grad):
        cfg = self.config
        if cfg.kind == "sgd":
            param -= cfg.eta * grad
            return
        m, s = self._moments(key, param.shape)
        m *= cfg.beta1
        m += (1 - cfg.beta1) * grad
        s *= cfg.beta2
        s += (1 - cfg.beta2) * grad * grad
        m_hat = m / (1 - cfg.beta1 ** self.step_count)
        s_hat = s / (1 - cfg.beta2 ** self.step_count)
        param -= cfg.eta * m_hat / (np.sqrt(s_hat) + cfg.eps)

    def state_arrays(self):
        keys = sorted(self.m)
        return keys, [self.m[k] for k in keys], [self.s[k] for k in keys]


def apply_update(net: Network, grads: GradientSet, opt) -> Network:
    """Apply one optimizer step in place; frozen layers are never written."""
    optimizer = opt if isinstance(opt, Optimizer) else Optimizer(opt)
    if len(grads.dw) != net.depth:
        raise ContractError("gradient set does not match network depth")
    for i, layer in enumerate(net.layers):
        if grads.dw[i].shape != layer.w.shape or grads.dv[i].shape != layer.v.shape:
            raise ContractError(f"gradient shape mismatch at layer {i + 1}")
        if layer.frozen and (np.any(grads.dw[i]) or np.any(grads.dv[i])):
            raise ContractError(f"non-zero gradient for frozen layer {i + 1}")
    learning = [i for i, layer in enumerate(net.layers) if not layer.frozen]
    if not all(np.isfinite(grads.dw[i]).all() and np.isfinite(grads.dv[i]).all() for i in learning):
        raise NumericError("non-finite gradient; update aborted")
    optimizer.step_count += 1
    for i in learning:
        layer = net.layers[i]
        optimizer.update(f"w{i + 1}", layer.w, grads.dw[i])
        if layer.recurrent:
            optimizer.update(f"v{i + 1}", layer.v, grads.dv[i])
    return net


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class PretrainResult:
    net: Network
    history: list
    optimizer: Optimizer
    rng: np.random.Generator


def train_epoch(net, x, y, optimizer, rng, *, batch_size=32, logit_scale=1.0,
                first_learning_layer=1, start_layer=1, v_thr_schedule=None, on_batch=None,
                shuffle=True):
    """One pass over ``(x, y)``. Returns ``(mean loss, accuracy)``."""
    n = x.shape[0]
    order = rng.permutation(n) if shuffle else np.arange(n)
    total_loss = 0.0
    correct = 0
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        out, traces = network_forward(net, x[idx], start_layer, v_thr_schedule)
        report = readout_loss(out, y[idx], logit_scale)
        grads = bptt_backward(net, traces, report.grad, first_learning_layer)
        apply_update(net, grads, optimizer)
        total_loss += report.loss * len(idx)
        correct += int(np.sum(report.prediction == y[idx]))
        if on_batch is not None:
            on_batch(traces)
    return total_loss / n, correct / n


def pretrain(net: Network, x, y, epochs, opt: OptimizerConfig, *, batch_size=32, seed=0,
             logit_gain=10.0, on_epoch=None) -> PretrainResult:
    """Train every layer on ``(x, y)`` with static thresholds.

    ``x`` is a rasterised batch ``(B, T, N_in)``; the logit scale is
    ``logit_gain / T`` so the readout is a firing rate times the gain.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ContractError("pre-training set is empty")
    if np.any(y < 0) or np.any(y >= net.layer_widths[-1]):
        raise ContractError("labels exceed the output layer width")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for layer in net.layers:
        layer.frozen = False
    optimizer = Optimizer(opt)
    history = []
    scale = logit_gain / x.shape[1]
    for ep in range(epochs):
        loss, acc = train_epoch(net, x, y, optimizer, rng, batch_size=batch_size, logit_scale=scale)
        history.append(EpochMetrics(ep + 1, loss, acc))
        if on_epoch is not None:
            on_epoch(history[-1])
    return PretrainResult(net, history, optimizer, rng)


# --- checkpoint file -----------------------------------------------------------
#
# b"SNCK" | u16 version | u32 header length | UTF-8 JSON header | float64 arrays
# The header lists the arrays in storage order; all integers little-endian.

CHECKPOINT_MAGIC = b"SNCK"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(net: Network, optimizer: Optional[Optimizer] = None,
                     rng: Optional[np.random.Generator] = None, extra=None) -> bytes:
    arrays = []
    names = []
    for i, layer in enumerate(net.layers):
        names += [f"w{i + 1}", f"v{i + 1}"]
        arrays += [layer.w, layer.v]
    opt_header = None
    if optimizer is not None:
        keys, ms, ss = optimizer.state_arrays()
        opt_header = {"config": asdict(optimizer.config), "step": optimizer.step_count, "keys": keys}
        for k, m, s in zip(keys, ms, ss):
            names += [f"m:{k}", f"s:{k}"]
            arrays += [m, s]
    header = {
        "topology": {
            "input_width": net.input_width,
            "widths": list(net.layer_widths),
            "frozen": [l.frozen for l in net.layers],
            "recurrent": [l.recurrent for l in net.layers],
            "params": [asdict(l.params) for l in net.layers],
        },
        "optimizer": opt_header,
        "rng": None if rng is None else rng.bit_generator.state,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


@dataclass
class Checkpoint:
    net: Network
    optimizer: Optional[Optimizer] = None
    rng: Optional[np.random.Generator] = None
    extra: dict = field(default_factory=dict)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    if len(data) < 10:
        raise DataError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[10:10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from None
    pos = 10 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(data):
            raise DataError(f"checkpoint truncated in array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data, "<f8", int(np.prod(shape)), pos).reshape(shape).astype(float)
        pos += nbytes
    topo = header["topology"]
    layers = []
    for i, (frozen, rec, params) in enumerate(zip(topo["frozen"], topo["recurrent"], topo["params"])):
        layers.append(LifLayer(arrays[f"w{i + 1}"], arrays[f"v{i + 1}"], LifParams(**params), frozen, rec))
    net = Network(layers)
    optimizer = None
    if header["optimizer"] is not None:
        oh = header["optimizer"]
        optimizer = Optimizer(OptimizerConfig(**oh["config"]))
        optimizer.step_count = oh["step"]
        for k in oh["keys"]:
            optimizer.m[k] = arrays[f"m:{k}"]
            optimizer.s[k] = arrays[f"s:{k}"]
    rng = None
    if header["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
    return Checkpoint(net, optimizer, rng, header.get("extra", {}))


def save_checkpoint(path, net, optimizer=None, rng=None, extra=None):
    data = checkpoint_bytes(net, optimizer, rng, extra)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
