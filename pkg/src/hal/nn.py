"""Small float64 neural-network kernel: conv/pool/dense/relu/dropout/softmax
with hand-written reverse-mode gradients and Adam.

Parameters are a flat list ``[W0, b0, W1, b1, ...]`` in layer order; only
conv2d and dense layers own parameters.
"""

import json
import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv2d", "maxpool", "dense", "relu", "dropout", "softmax")
MODES = ("train", "eval", "mc")
CHECKPOINT_VERSION = 1

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class Layer:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    k: int = 0
    pad: int = 0
    size: int = 2
    in_features: int = 0
    out_features: int = 0
    p: float = 0.0

    def has_params(self):
        return self.kind in ("conv2d", "dense")


def conv2d(in_ch, out_ch, k, pad=0):
    return Layer("conv2d", in_ch=in_ch, out_ch=out_ch, k=k, pad=pad)


def maxpool(size=2):
    return Layer("maxpool", size=size)


def dense(in_features, out_features):
    return Layer("dense", in_features=in_features, out_features=out_features)


def relu():
    return Layer("relu")


def dropout(p):
    return Layer("dropout", p=float(p))


def softmax_layer():
    return Layer("softmax")


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple
    layers: tuple
    embedding: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates

    def shapes(self):
        """Per-layer output shapes (excluding the batch axis)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.kind == "conv2d":
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise ValueError(f"layer {i}: conv2d expects {layer.in_ch} channels, got shape {shape}")
                h = shape[1] + 2 * layer.pad - layer.k + 1
                w = shape[2] + 2 * layer.pad - layer.k + 1
                if h < 1 or w < 1:
                    raise ValueError(f"layer {i}: conv2d kernel larger than input {shape}")
                shape = (layer.out_ch, h, w)
            elif layer.kind == "maxpool":
                if len(shape) != 3 or shape[1] < layer.size or shape[2] < layer.size:
                    raise ValueError(f"layer {i}: maxpool cannot reduce shape {shape}")
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif layer.kind == "dense":
                if int(np.prod(shape)) != layer.in_features:
                    raise ValueError(
                        f"layer {i}: dense expects {layer.in_features} inputs, got shape {shape}")
                shape = (layer.out_features,)
            elif layer.kind == "dropout":
                if not 0.0 <= layer.p < 1.0:
                    raise ValueError(f"layer {i}: dropout rate must be in [0, 1), got {layer.p}")
            out.append(shape)
        if not 0 <= self.embedding < len(self.layers):
            raise ValueError("embedding layer index out of range")
        if len(out[self.embedding]) != 1:
            raise ValueError("embedding layer output must be a flat vector")
        return out

    @property
    def output_size(self):
        return int(np.prod(self.shapes()[-1]))

    @property
    def embedding_size(self):
        return self.shapes()[self.embedding][0]

    @property
    def ends_in_softmax(self):
        return self.layers[-1].kind == "softmax"

    def param_shapes(self):
        shapes = []
        for layer in self.layers:
            if layer.kind == "conv2d":
                shapes += [(layer.out_ch, layer.in_ch, layer.k, layer.k), (layer.out_ch,)]
            elif layer.kind == "dense":
                shapes += [(layer.in_features, layer.out_features), (layer.out_features,)]
        return shapes

    def param_count(self):
        return int(sum(np.prod(s) for s in self.param_shapes()))

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "embedding": self.embedding,
            "layers": [{k: v for k, v in layer.__dict__.items()} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), tuple(Layer(**l) for l in d["layers"]), int(d["embedding"]))


def lenet_lite(n_classes=10, image_size=14, p_drop=0.5):
    """conv-relu-pool-conv-relu-pool-dense(64, embedding)-relu-dropout-dense-softmax.

    Convs are 'same'-padded so the stack also fits 14x14 inputs.
    """
    s = image_size // 2 // 2
    return ModelSpec(
        (1, image_size, image_size),
        (conv2d(1, 6, 5, pad=2), relu(), maxpool(2),
         conv2d(6, 16, 5, pad=2), relu(), maxpool(2),
         dense(16 * s * s, 64), relu(), dropout(p_drop),
         dense(64, n_classes), softmax_layer()),
        embedding=6,
    )


def mlp(n_in, n_classes=10, hidden=64, p_drop=0.5, image_size=None):
    """dense(hidden, embedding)-relu-dropout-dense-softmax over flattened pixels."""
    input_shape = (1, image_size, image_size) if image_size else (n_in,)
    return ModelSpec(
        input_shape,
        (dense(n_in, hidden), relu(), dropout(p_drop), dense(hidden, n_classes), softmax_layer()),
        embedding=0,
    )


def init_params(spec, seed):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for layer in spec.layers:
        if layer.kind == "conv2d":
            fan_in = layer.in_ch * layer.k * layer.k
            fan_out = layer.out_ch * layer.k * layer.k
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-a, a, size=(layer.out_ch, layer.in_ch, layer.k, layer.k)))
            params.append(np.zeros(layer.out_ch))
        elif layer.kind == "dense":
            a = np.sqrt(6.0 / (layer.in_features + layer.out_features))
            params.append(rng.uniform(-a, a, size=(layer.in_features, layer.out_features)))
            params.append(np.zeros(layer.out_features))
    return params


def check_params(spec, params):
    shapes = spec.param_shapes()
    if len(params) != len(shapes):
        raise ValueError(f"expected {len(shapes)} parameter tensors, got {len(params)}")
    for i, (p, s) in enumerate(zip(params, shapes)):
        if p.shape != s:
            raise ValueError(f"parameter {i}: shape {p.shape} does not match spec {s}")
        if not np.all(np.isfinite(p)):
            raise ValueError(f"parameter {i} contains non-finite values")


# -- counter-based randomness for dropout masks -------------------------------

def _mix(z):
    z = (z + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


def hash_uniform(*keys):
    """Uniform [0, 1) values from a splitmix64 chain over broadcast integer keys.

    Each output depends only on its own keys, so a row's dropout mask does not
    depend on which other rows share its batch.
    """
    with np.errstate(over="ignore"):
        h = np.uint64(0)
        for key in keys:
            k = np.asarray(key).astype(np.int64).view(np.uint64) if np.ndim(key) else np.uint64(int(key) & 0xFFFFFFFFFFFFFFFF)
            h = _mix(h ^ k)
        return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def derive_seed(seed, *keys):
    """Independent child seed from a parent seed and int/str keys."""
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def dropout_mask(p, seed, layer_index, row_keys, n_units):
    u = hash_uniform(seed, layer_index, np.asarray(row_keys)[:, None], np.arange(n_units)[None, :])
    return (u >= p).astype(np.float64) / (1.0 - p)


# -- forward / backward ---------------------------------------------------------

@dataclass
class ForwardCache:
    mode: str
    inputs: list = field(default_factory=list)   # input to each layer
    masks: dict = field(default_factory=dict)    # layer index -> dropout mask
    extra: dict = field(default_factory=dict)    # layer index -> im2col / argmax data
    start: int = 0


def _im2col(x, k, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols, x_shape, k, pad, ho, wo):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    d = dcols.reshape(n, ho, wo, c, k, k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho, j:j + wo] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return dx


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(spec, params, batch, mode="eval", seed=0, row_keys=None, start=0):
    """Run the network on ``batch``.

    Returns ``(output, embedding, cache)``. ``output`` is the last layer's
    activation (class probabilities for softmax-terminated specs). In train
    and mc modes dropout masks are drawn from ``seed`` keyed by layer index
    and ``row_keys`` (default: row position). ``start`` resumes from the
    input of layer ``start``; ``batch`` must then have that layer's input shape.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    check_params(spec, params)
    x = np.asarray(batch, dtype=np.float64)
    expected = spec.input_shape if start == 0 else spec.shapes()[start - 1]
    if x.shape[1:] != tuple(expected):
        raise ValueError(f"batch shape {x.shape[1:]} does not match expected input {tuple(expected)}")
    n = x.shape[0]
    keys = np.arange(n) if row_keys is None else np.asarray(row_keys)
    cache = ForwardCache(mode=mode, start=start)
    slot = sum(1 for layer in spec.layers[:start] if layer.has_params()) * 2
    embedding = None
    for i in range(start, len(spec.layers)):
        layer = spec.layers[i]
        cache.inputs.append(x)
        if layer.kind == "conv2d":
            W, b = params[slot], params[slot + 1]
            slot += 2
            cols, ho, wo = _im2col(x, layer.k, layer.pad)
            out = cols @ W.reshape(layer.out_ch, -1).T + b
            cache.extra[i] = (cols, ho, wo)
            x = out.reshape(n, ho, wo, layer.out_ch).transpose(0, 3, 1, 2)
        elif layer.kind == "maxpool":
            s = layer.size
            c, h, w = x.shape[1:]
            hh, ww = h // s, w // s
            xr = x[:, :, :hh * s, :ww * s].reshape(n, c, hh, s, ww, s).transpose(0, 1, 2, 4, 3, 5)
            xr = xr.reshape(n, c, hh, ww, s * s)
            arg = xr.argmax(axis=-1)
            cache.extra[i] = arg
            x = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
        elif layer.kind == "dense":
            W, b = params[slot], params[slot + 1]
            slot += 2
            x = x.reshape(n, -1) @ W + b
        elif layer.kind == "relu":
            x = np.maximum(x, 0.0)
        elif layer.kind == "dropout":
            if mode != "eval":
                mask = dropout_mask(layer.p, seed, i, keys, int(np.prod(x.shape[1:]))).reshape(x.shape)
                cache.masks[i] = mask
                x = x * mask
        elif layer.kind == "softmax":
            x = _softmax(x.reshape(n, -1))
        if i == spec.embedding:
            embedding = x
    return x, embedding, cache


def backward(spec, params, cache, grad_out, skip_softmax=False):
    """Gradients of ``sum(grad_out * output)`` w.r.t. every parameter.

    With ``skip_softmax=True`` the trailing softmax layer is bypassed and
    ``grad_out`` is taken as the gradient w.r.t. its input (the logits).
    """
    check_params(spec, params)
    if cache.start != 0 or len(cache.inputs) != len(spec.layers):
        raise ValueError("cache does not cover the full network")
    if cache.inputs[0].shape[1:] != spec.input_shape:
        raise ValueError("cache does not match spec")
    grads = [np.zeros_like(p) for p in params]
    g = np.asarray(grad_out, dtype=np.float64)
    slot = len(params)
    last = len(spec.layers) - 1
    for i in range(last, -1, -1):
        layer = spec.layers[i]
        x = cache.inputs[i]
        n = x.shape[0]
        if layer.kind == "softmax":
            if skip_softmax and i == last:
                continue
            y = _softmax(x.reshape(n, -1))
            g = (y * (g - (g * y).sum(axis=1, keepdims=True))).reshape(x.shape)
        elif layer.kind == "dense":
            slot -= 2
            W = params[slot]
            xf = x.reshape(n, -1)
            if W.shape[0] != xf.shape[1]:
                raise ValueError("cache does not match params")
            grads[slot] = xf.T @ g
            grads[slot + 1] = g.sum(axis=0)
            g = (g @ W.T).reshape(x.shape)
        elif layer.kind == "conv2d":
            slot -= 2
            W = params[slot]
            cols, ho, wo = cache.extra[i]
            gf = g.transpose(0, 2, 3, 1).reshape(-1, layer.out_ch)
            grads[slot] = (gf.T @ cols).reshape(W.shape)
            grads[slot + 1] = gf.sum(axis=0)
            dcols = gf @ W.reshape(layer.out_ch, -1)
            g = _col2im(dcols, x.shape, layer.k, layer.pad, ho, wo)
        elif layer.kind == "maxpool":
            s = layer.size
            c, h, w = x.shape[1:]
            hh, ww = h // s, w // s
            arg = cache.extra[i]
            dwin = np.zeros((n, c, hh, ww, s * s))
            np.put_along_axis(dwin, arg[..., None], g.reshape(n, c, hh, ww)[..., None], axis=-1)
            dwin = dwin.reshape(n, c, hh, ww, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh * s, ww * s)
            gx = np.zeros_like(x)
            gx[:, :, :hh * s, :ww * s] = dwin
            g = gx
        elif layer.kind == "relu":
            g = g * (x > 0)
        elif layer.kind == "dropout":
            if i in cache.masks:
                g = g * cache.masks[i]
    return grads


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update. Returns new (params, state); inputs are untouched."""
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match params")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient entries")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, spec, params, meta=None):
    """Write spec + params as a versioned .npz blob."""
    header = {"version": CHECKPOINT_VERSION, "spec": spec.to_dict(), "meta": meta or {}}
    arrays = {f"p{i}": p for i, p in enumerate(params)}
    with open(path, "wb") as f:
        np.savez(f, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    with np.load(path) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        spec = ModelSpec.from_dict(header["spec"])
        params = [z[f"p{i}"].copy() for i in range(len(spec.param_shapes()))]
    check_params(spec, params)
    return spec, params, header["meta"]
