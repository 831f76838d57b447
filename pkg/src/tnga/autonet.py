"""Dense numerical core for the recurrent network.

Architecture (default): GRU(256) -> GRU(256) -> FC(200, LeakyReLU) -> FC(12).
Everything runs in float64 on batched, zero-padded sequences of shape
(batch, time, features) with a (batch, time) validity mask.  Padded steps
carry the previous hidden state forward unchanged.

GRU convention (two bias vectors per gate set, gate order z, r, n):

    z = sigmoid(x W_z + b_iz + h U_z + b_hz)
    r = sigmoid(x W_r + b_ir + h U_r + b_hr)
    n = tanh(x W_n + b_in + r * (h U_n + b_hn))
    h' = (1 - z) * h + z * n
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TNGACKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 40
    gru_sizes: tuple[int, ...] = (256, 256)
    fc_size: int = 200
    n_classes: int = 12
    leaky_slope: float = 0.01
    front_split: int = 1

    def __post_init__(self):
        object.__setattr__(self, "gru_sizes", tuple(int(h) for h in self.gru_sizes))
        sizes = (self.input_dim, self.fc_size, self.n_classes, *self.gru_sizes)
        if len(self.gru_sizes) == 0 or min(sizes) < 1:
            raise ValueError(f"all layer sizes must be >= 1: {self}")
        if not 1 <= self.front_split <= len(self.gru_sizes):
            raise ValueError(f"front_split must be in [1, {len(self.gru_sizes)}], got {self.front_split}")

    @property
    def state_dim(self) -> int:
        """Width of the front-end output (the grafted state)."""
        return self.gru_sizes[self.front_split - 1]

    def to_dict(self):
        d = asdict(self)
        d["gru_sizes"] = list(self.gru_sizes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "gru_sizes": tuple(d["gru_sizes"])})


def param_count(config: NetConfig) -> int:
    n, d = 0, config.input_dim
    for h in config.gru_sizes:
        n += 3 * h * (d + h + 2)
        d = h
    n += d * config.fc_size + config.fc_size
    n += config.fc_size * config.n_classes + config.n_classes
    return n


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class GRULayer:
    kind = "gru"

    def __init__(self, name: str, input_dim: int, hidden: int):
        self.name = name
        self.input_dim = input_dim
        self.hidden = hidden
        self.out_dim = hidden

    def param_shapes(self):
        h, d = self.hidden, self.input_dim
        return {"W": (d, 3 * h), "U": (h, 3 * h), "b_i": (3 * h,), "b_h": (3 * h,)}

    def forward(self, p, x, mask, h0=None):
        B, T, _ = x.shape
        H = self.hidden
        xw = x @ p["W"] + p["b_i"]
        h = np.zeros((B, H)) if h0 is None else h0
        out = np.empty((B, T, H))
        hs_prev = np.empty((B, T, H))
        zs = np.empty((B, T, H))
        rs = np.empty((B, T, H))
        ns = np.empty((B, T, H))
        hns = np.empty((B, T, H))
        U, bh = p["U"], p["b_h"]
        for t in range(T):
            hu = h @ U + bh
            zr = sigmoid(xw[:, t, : 2 * H] + hu[:, : 2 * H])
            z, r = zr[:, :H], zr[:, H:]
            hn = hu[:, 2 * H:]
            n = np.tanh(xw[:, t, 2 * H:] + r * hn)
            h_new = h + z * (n - h)
            m = mask[:, t, None]
            hs_prev[:, t] = h
            zs[:, t], rs[:, t], ns[:, t], hns[:, t] = z, r, n, hn
            h = m * h_new + (1.0 - m) * h
            out[:, t] = h
        cache = (x, mask, hs_prev, zs, rs, ns, hns)
        return out, cache

    def backward(self, p, dout, cache, need_dx=True):
        x, mask, hs_prev, zs, rs, ns, hns = cache
        B, T, H = dout.shape
        U = p["U"]
        dxw = np.empty((B, T, 3 * H))
        dU = np.zeros_like(U)
        db_h = np.zeros(3 * H)
        dh_next = np.zeros((B, H))
        dhu = np.empty((B, 3 * H))
        for t in range(T - 1, -1, -1):
            m = mask[:, t, None]
            dh = dout[:, t] + dh_next
            dh_new = m * dh
            h_prev, z, r, n, hn = hs_prev[:, t], zs[:, t], rs[:, t], ns[:, t], hns[:, t]
            dn_pre = dh_new * z * (1.0 - n * n)
            dz_pre = dh_new * (n - h_prev) * z * (1.0 - z)
            dr_pre = dn_pre * hn * r * (1.0 - r)
            dxw[:, t, :H] = dz_pre
            dxw[:, t, H: 2 * H] = dr_pre
            dxw[:, t, 2 * H:] = dn_pre
            dhu[:, :H] = dz_pre
            dhu[:, H: 2 * H] = dr_pre
            dhu[:, 2 * H:] = dn_pre * r
            dU += h_prev.T @ dhu
            db_h += dhu.sum(axis=0)
            dh_next = dh_new * (1.0 - z) + (1.0 - m) * dh + dhu @ U.T
        flat = dxw.reshape(B * T, 3 * H)
        grads = {
            "W": x.reshape(B * T, -1).T @ flat,
            "U": dU,
            "b_i": flat.sum(axis=0),
            "b_h": db_h,
        }
        dx = (dxw @ p["W"].T) if need_dx else None
        return dx, grads


class DenseLayer:
    kind = "fc"

    def __init__(self, name: str, input_dim: int, out_dim: int, leaky_slope: float | None):
        self.name = name
        self.input_dim = input_dim
        self.out_dim = out_dim
        self.leaky_slope = leaky_slope  # None = linear output

    def param_shapes(self):
        return {"W": (self.input_dim, self.out_dim), "b": (self.out_dim,)}

    def forward(self, p, x, mask, h0=None):
        pre = x @ p["W"] + p["b"]
        if self.leaky_slope is None:
            return pre, (x, pre)
        return np.where(pre > 0, pre, self.leaky_slope * pre), (x, pre)

    def backward(self, p, dout, cache, need_dx=True):
        x, pre = cache
        if self.leaky_slope is not None:
            dout = np.where(pre > 0, dout, self.leaky_slope * dout)
        d = dout.shape[-1]
        grads = {
            "W": x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, d),
            "b": dout.reshape(-1, d).sum(axis=0),
        }
        dx = (dout @ p["W"].T) if need_dx else None
        return dx, grads


def build_layers(config: NetConfig):
    layers, d = [], config.input_dim
    for i, h in enumerate(config.gru_sizes):
        layers.append(GRULayer(f"gru{i}", d, h))
        d = h
    layers.append(DenseLayer("fc0", d, config.fc_size, config.leaky_slope))
    layers.append(DenseLayer("out", config.fc_size, config.n_classes, None))
    return layers


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateSequence:
    states: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if s.ndim != 2 or s.shape[0] != ts.shape[0]:
            raise ValueError(f"states {s.shape} and timestamps {ts.shape} disagree")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.states.shape[0]


@dataclass
class Network:
    """Ordered parameters for the layer stack plus a fixed input normalization.

    ``input_shift`` / ``input_scale`` standardize features before the first
    layer (x - shift) / scale.  They are not trained and live in the
    checkpoint header, not in the weight payload.
    """

    config: NetConfig
    params: dict = field(default_factory=dict)
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        self.layers = build_layers(self.config)
        d = self.config.input_dim
        if self.input_shift is None:
            self.input_shift = np.zeros(d)
        if self.input_scale is None:
            self.input_scale = np.ones(d)
        self.input_shift = np.asarray(self.input_shift, dtype=np.float64)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64)
        for layer in self.layers:
            for k, shape in layer.param_shapes().items():
                key = f"{layer.name}.{k}"
                if key not in self.params:
                    self.params[key] = np.zeros(shape)
                elif self.params[key].shape != tuple(shape):
                    raise ValueError(f"{key}: shape {self.params[key].shape} != {shape}")

    @classmethod
    def init(cls, config: NetConfig, rng, **kw) -> "Network":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); GRU fan_in is the hidden size."""
        net = cls(config, **kw)
        for layer in net.layers:
            k = 1.0 / np.sqrt(layer.hidden if layer.kind == "gru" else layer.input_dim)
            for name, shape in layer.param_shapes().items():
                net.params[f"{layer.name}.{name}"] = rng.uniform(-k, k, size=shape)
        return net

    @property
    def param_names(self):
        return [f"{layer.name}.{k}" for layer in self.layers for k in layer.param_shapes()]

    def layer_params(self, layer):
        return {k: self.params[f"{layer.name}.{k}"] for k in layer.param_shapes()}

    @property
    def front_layers(self):
        return self.layers[: self.config.front_split]

    @property
    def trunk_layers(self):
        return self.layers[self.config.front_split:]

    def front_param_names(self):
        return [f"{l.name}.{k}" for l in self.front_layers for k in l.param_shapes()]

    def trunk_param_names(self):
        return [f"{l.name}.{k}" for l in self.trunk_layers for k in l.param_shapes()]

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "Network":
        return Network(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            self.input_shift.copy(),
            self.input_scale.copy(),
        )

    def quantized(self) -> "Network":
        """Copy with weights rounded to float32, the checkpoint precision."""
        net = self.copy()
        for k, v in net.params.items():
            net.params[k] = v.astype(np.float32).astype(np.float64)
        return net

    # -- batched passes -----------------------------------------------------

    def normalize(self, x):
        return (x - self.input_shift) / self.input_scale

    def run(self, layers, x, mask, h0s=None):
        """Forward through ``layers``; returns (output, caches).

        ``h0s`` optionally gives a (batch, hidden) initial state per layer
        (ignored for FC layers).
        """
        caches = []
        for i, layer in enumerate(layers):
            h0 = None if h0s is None else h0s[i]
            x, c = layer.forward(self.layer_params(layer), x, mask, h0)
            caches.append(c)
        return x, caches

    def backprop(self, layers, dout, caches, need_dx=False):
        """Reverse pass; returns (d input, {param name: grad})."""
        grads = {}
        for i in range(len(layers) - 1, -1, -1):
            layer = layers[i]
            want_dx = need_dx or i > 0
            dout, g = layer.backward(self.layer_params(layer), dout, caches[i], need_dx=want_dx)
            for k, v in g.items():
                grads[f"{layer.name}.{k}"] = v
        return dout, grads

    def logits_batch(self, x, mask):
        out, _ = self.run(self.layers, self.normalize(x), mask)
        return out


def _features_array(features):
    if hasattr(features, "frames"):
        return features.frames, features.timestamps
    x = np.asarray(features, dtype=np.float64)
    return x, np.arange(len(x), dtype=np.int64)


def forward_front(network: Network, features, initial=None, return_final=False):
    """Front-end hidden states for one sequence.

    Starts from zeros unless ``initial`` gives one hidden vector per front
    GRU layer.  With ``return_final`` also returns the per-layer final
    states, so a sequence can be continued in chunks.
    """
    x, ts = _features_array(features)
    if x.ndim != 2 or (x.shape[0] and x.shape[1] != network.config.input_dim):
        raise ValueError(f"feature width {x.shape[-1]} != input_dim {network.config.input_dim}")
    layers = network.front_layers
    if initial is None:
        initial = [np.zeros(layer.hidden) for layer in layers]
    if x.shape[0] == 0:
        seq = StateSequence(np.zeros((0, network.config.state_dim)), ts)
        return (seq, [np.asarray(h, dtype=np.float64) for h in initial]) if return_final else seq
    h = network.normalize(x)[None]
    finals = []
    for layer, h0 in zip(layers, initial):
        h, _ = layer.forward(network.layer_params(layer), h, np.ones((1, len(x))),
                             np.asarray(h0, dtype=np.float64)[None])
        finals.append(h[0, -1].copy())
    seq = StateSequence(h[0], ts)
    return (seq, finals) if return_final else seq


def forward_trunk(network: Network, states) -> np.ndarray:
    """Per-timestep class logits (T x n_classes) from front-end states."""
    s = states.states if isinstance(states, StateSequence) else np.asarray(states, dtype=np.float64)
    if s.ndim != 2 or (s.shape[0] and s.shape[1] != network.config.state_dim):
        raise ValueError(f"state width {s.shape[-1]} != trunk input {network.config.state_dim}")
    if s.shape[0] == 0:
        return np.zeros((0, network.config.n_classes))
    out, _ = network.run(network.trunk_layers, s[None], np.ones((1, len(s))))
    return out[0]


def forward(network: Network, features) -> np.ndarray:
    x, _ = _features_array(features)
    if x.shape[0] == 0:
        return np.zeros((0, network.config.n_classes))
    out, _ = network.run(network.layers, network.normalize(x)[None], np.ones((1, len(x))))
    return out[0]


def gru_step(layer_params: dict, x_t, h_prev):
    """One GRU update for a single vector (or batch of row vectors)."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    h_prev = np.atleast_2d(np.asarray(h_prev, dtype=np.float64))
    d, h3 = layer_params["W"].shape
    if x_t.shape[1] != d or h_prev.shape[1] != h3 // 3:
        raise ValueError("gru_step: dimension mismatch")
    layer = GRULayer("step", d, h3 // 3)
    out, _ = layer.forward(layer_params, x_t[:, None, :], np.ones((x_t.shape[0], 1)), h0=h_prev)
    return out[:, 0].squeeze(0) if out.shape[0] == 1 else out[:, 0]


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rejected: int = 0


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update of ``params`` in place for keys in ``grads``.

    A step with any non-finite gradient is skipped and counted in
    ``state.rejected``.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"{k}: grad shape {g.shape} != param shape {params[k].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.rejected += 1
        log.warning("non-finite gradient; Adam step %d rejected", state.step + 1)
        return params
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k in sorted(grads):
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale grads in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if np.isfinite(total) and total > max_norm:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(network: Network, path, meta: dict | None = None) -> None:
    """Write magic, u32 header length, JSON header, then f32 LE weights.

    Weights follow ``network.param_names`` order: for each GRU layer W, U,
    b_i, b_h; for each FC layer W, b; each array row-major.
    """
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": network.config.to_dict(),
        "n_params": network.n_params(),
        "layout": [[k, list(network.params[k].shape)] for k in network.param_names],
        "input_shift": [float(v) for v in network.input_shift.astype(np.float32)],
        "input_scale": [float(v) for v in network.input_scale.astype(np.float32)],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(network.params[k].astype("<f4").tobytes() for k in network.param_names)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    return _parse_header(data, path)[0]


def _parse_header(data, path):
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    if len(data) < off + 4:
        raise ValueError(f"{path}: truncated checkpoint header")
    (n,) = struct.unpack("<I", data[off: off + 4])
    try:
        header = json.loads(data[off + 4: off + 4 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    return header, off + 4 + n


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        data = fh.read()
    header, off = _parse_header(data, path)
    config = NetConfig.from_dict(header["config"])
    expected = param_count(config)
    if header["n_params"] != expected:
        raise ValueError(f"{path}: header lists {header['n_params']} params, config implies {expected}")
    payload = data[off:]
    if len(payload) != 4 * expected:
        raise ValueError(
            f"{path}: weight count mismatch: header says {expected} params, payload holds {len(payload) / 4:g}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    net = Network(config, input_shift=np.array(header["input_shift"]), input_scale=np.array(header["input_scale"]))
    pos = 0
    for k in net.param_names:
        shape = net.params[k].shape
        size = int(np.prod(shape))
        net.params[k] = flat[pos: pos + size].reshape(shape).copy()
        pos += size
    return net
