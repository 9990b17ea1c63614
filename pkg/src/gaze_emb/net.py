"""Dense-concatenation dilated 1-D convolutional embedding network.

The forward pass records a tape of per-operation caches; walking the tape
backwards gives exact reverse-mode gradients. Layer ``l`` reads the stacked
input plus every previous layer's output, so all feature maps live in one
preallocated channel-major ``(C_total, B, L)`` buffer and each layer reads a
prefix of it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 2
    n_conv_layers: int = 8
    growth: int = 32
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 64)
    embed_dim: int = 128
    use_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.dilations) != self.n_conv_layers:
            raise NetError("need one dilation per conv layer")
        if self.kernel % 2 != 1:
            raise NetError("kernel width must be odd")
        if self.embed_dim < 1 or self.growth < 1 or self.in_channels < 1:
            raise NetError("embed_dim, growth and in_channels must be positive")
        if any(d < 1 for d in self.dilations):
            raise NetError("dilations must be >= 1")

    def layer_in_channels(self, layer: int) -> int:
        """Input width of conv layer ``layer`` (0-based)."""
        return self.in_channels + self.growth * layer

    @property
    def total_features(self) -> int:
        return self.in_channels + self.growth * self.n_conv_layers

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for l in range(self.n_conv_layers):
            shapes[f"conv{l}.weight"] = (self.growth, self.layer_in_channels(l), self.kernel)
            if self.use_norm:
                shapes[f"norm{l}.scale"] = (self.growth,)
                shapes[f"norm{l}.offset"] = (self.growth,)
                shapes[f"norm{l}.running_mean"] = (self.growth,)
                shapes[f"norm{l}.running_var"] = (self.growth,)
            else:
                shapes[f"conv{l}.bias"] = (self.growth,)
        shapes["head.weight"] = (self.embed_dim, self.total_features)
        shapes["head.bias"] = (self.embed_dim,)
        return shapes

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{**d, "dilations": tuple(d["dilations"])})


def is_buffer(name: str) -> bool:
    return ".running_" in name


@dataclass(eq=False)
class ModelParams:
    """Named float64 arrays for one network; running statistics are buffers."""

    config: NetConfig
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.config.param_shapes()
        if list(self.arrays) != list(shapes):
            missing = set(shapes) ^ set(self.arrays)
            raise NetError(f"parameter names do not match config: {sorted(missing)}")
        for name, shape in shapes.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise NetError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def learnable(self) -> list[str]:
        return [n for n in self.arrays if not is_buffer(n)]

    def n_learnable(self) -> int:
        return sum(self.arrays[n].size for n in self.learnable)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def equals(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()
        )


def init_model(config: NetConfig, seed: int) -> ModelParams:
    """He-uniform kernels (bound sqrt(6 / fan_in)), zero biases, unit norm scales."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".scale") or name.endswith(".running_var"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(config, arrays)


# ---------------------------------------------------------------------------
# primitive ops: forward returns (out, cache); backward maps dout -> (din, grads).
# Activations are channel-major, shape (C, B, L), so each conv is one GEMM.


def conv1d_forward(x, w, bias, dilation):
    """Same-length dilated convolution with zero padding. x: (C, B, L), w: (O, C, K)."""
    c, b, length = x.shape
    o, _, k = w.shape
    pad = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = np.empty((k, c, b, length))
    for j in range(k):
        cols[j] = xp[:, :, j * dilation:j * dilation + length]
    cols = cols.reshape(k * c, b * length)
    w2 = w.transpose(0, 2, 1).reshape(o, k * c)
    y = (w2 @ cols).reshape(o, b, length)
    if bias is not None:
        y += bias[:, None, None]
    return y, (cols, w2, w.shape, dilation, pad, x.shape)


def conv1d_backward(dy, cache):
    cols, w2, w_shape, dilation, pad, x_shape = cache
    o, c, k = w_shape
    _, b, length = x_shape
    dy2 = dy.reshape(o, b * length)
    dw = (dy2 @ cols.T).reshape(o, k, c).transpose(0, 2, 1)
    dcols = (w2.T @ dy2).reshape(k, c, b, length)
    dxp = np.zeros((c, b, length + 2 * pad))
    for j in range(k):
        dxp[:, :, j * dilation:j * dilation + length] += dcols[j]
    db = dy2.sum(axis=1)
    return dxp[:, :, pad:pad + length], np.ascontiguousarray(dw), db


def batchnorm_forward(z, scale, offset, running_mean, running_var, training):
    if training:
        mean = z.mean(axis=(1, 2))
        var = z.var(axis=(1, 2))
        n = z.shape[1] * z.shape[2]
        unbiased = var * n / max(n - 1, 1)
        new_mean = (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mean
        new_var = (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mean[:, None, None]) * inv_std[:, None, None]
    out = xhat * scale[:, None, None] + offset[:, None, None]
    return out, (xhat, inv_std, scale, training), (new_mean, new_var)


def batchnorm_backward(dout, cache):
    xhat, inv_std, scale, training = cache
    dscale = (dout * xhat).sum(axis=(1, 2))
    doffset = dout.sum(axis=(1, 2))
    dxhat = dout * scale[:, None, None]
    if training:
        n = xhat.shape[1] * xhat.shape[2]
        dz = (inv_std[:, None, None] / n) * (
            n * dxhat
            - dxhat.sum(axis=(1, 2))[:, None, None]
            - xhat * (dxhat * xhat).sum(axis=(1, 2))[:, None, None]
        )
    else:
        dz = dxhat * inv_std[:, None, None]
    return dz, dscale, doffset


# ---------------------------------------------------------------------------
# network


@dataclass
class Tape:
    """Caches recorded by a forward pass, consumed by :meth:`backward`."""

    params: ModelParams
    length: int
    layers: list = field(default_factory=list)
    pooled: np.ndarray | None = None
    running: dict[str, np.ndarray] = field(default_factory=dict)

    def backward(self, upstream: np.ndarray) -> dict[str, np.ndarray]:
        cfg = self.params.config
        upstream = np.asarray(upstream, dtype=np.float64)
        b = self.pooled.shape[0]
        if upstream.shape != (b, cfg.embed_dim):
            raise NetError(f"upstream gradient shape {upstream.shape} != {(b, cfg.embed_dim)}")
        grads: dict[str, np.ndarray] = {}
        grads["head.weight"] = upstream.T @ self.pooled
        grads["head.bias"] = upstream.sum(axis=0)
        dpooled = upstream @ self.params["head.weight"]  # (B, C_total)
        # d(mean over time) spreads evenly over the L steps
        d_feat = np.repeat((dpooled.T / self.length)[:, :, None], self.length, axis=2)

        for l in reversed(range(cfg.n_conv_layers)):
            conv_cache, norm_cache, relu_mask = self.layers[l]
            c_in = cfg.layer_in_channels(l)
            dy = d_feat[c_in:c_in + cfg.growth] * relu_mask
            if cfg.use_norm:
                dy, grads[f"norm{l}.scale"], grads[f"norm{l}.offset"] = batchnorm_backward(dy, norm_cache)
            dx, dw, db = conv1d_backward(dy, conv_cache)
            grads[f"conv{l}.weight"] = dw
            if not cfg.use_norm:
                grads[f"conv{l}.bias"] = db
            if l > 0:
                d_feat[:c_in] += dx
        return {name: grads[name] for name in self.params.learnable}


def _as_batch(x, config: NetConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != config.in_channels:
        raise NetError(
            f"expected input with {config.in_channels} channels, got shape {x.shape}"
        )
    return x


def forward_batch(params: ModelParams, x: np.ndarray, training: bool = False) -> tuple[np.ndarray, Tape]:
    """Embed a ``(B, C, L)`` batch. Returns embeddings ``(B, embed_dim)`` and the tape.

    In training mode normalization uses batch statistics and the tape carries
    updated running statistics (``tape.running``); params are not mutated.
    """
    cfg = params.config
    x = _as_batch(x, cfg)
    b, _, length = x.shape
    feats = np.empty((cfg.total_features, b, length))
    feats[:cfg.in_channels] = x.transpose(1, 0, 2)
    tape = Tape(params, length)
    for l in range(cfg.n_conv_layers):
        c_in = cfg.layer_in_channels(l)
        bias = None if cfg.use_norm else params[f"conv{l}.bias"]
        z, conv_cache = conv1d_forward(feats[:c_in], params[f"conv{l}.weight"], bias, cfg.dilations[l])
        norm_cache = None
        if cfg.use_norm:
            z, norm_cache, (rm, rv) = batchnorm_forward(
                z, params[f"norm{l}.scale"], params[f"norm{l}.offset"],
                params[f"norm{l}.running_mean"], params[f"norm{l}.running_var"], training,
            )
            tape.running[f"norm{l}.running_mean"] = rm
            tape.running[f"norm{l}.running_var"] = rv
        mask = z > 0
        feats[c_in:c_in + cfg.growth] = z * mask
        tape.layers.append((conv_cache, norm_cache, mask))
    pooled = feats.mean(axis=2).T
    tape.pooled = pooled
    emb = pooled @ params["head.weight"].T + params["head.bias"]
    return emb, tape


def forward(params: ModelParams, window) -> np.ndarray:
    """Embedding of one window (inference mode). Accepts a VelocityWindow or a C x L array."""
    x = getattr(window, "channels", window)
    emb, _ = forward_batch(params, x, training=False)
    return emb[0]


def embed_windows(params: ModelParams, windows: Sequence, batch_size: int = 64) -> np.ndarray:
    if not windows:
        return np.zeros((0, params.config.embed_dim))
    out = []
    for i in range(0, len(windows), batch_size):
        chunk = np.stack([getattr(w, "channels", w) for w in windows[i:i + batch_size]])
        out.append(forward_batch(params, chunk, training=False)[0])
    return np.concatenate(out)


def backprop(params: ModelParams, batch, upstream, training: bool = True) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * embeddings)`` w.r.t. every learnable parameter."""
    x = np.stack([getattr(w, "channels", w) for w in batch]) if isinstance(batch, (list, tuple)) else batch
    _, tape = forward_batch(params, x, training=training)
    return tape.backward(upstream)


# ---------------------------------------------------------------------------
# gradient check


def grad_check(
    config: NetConfig,
    seed: int,
    window_len: int,
    *,
    batch: int = 3,
    h: float = 1e-5,
    params: ModelParams | None = None,
    x: np.ndarray | None = None,
) -> float:
    """Max relative error of backprop against central finite differences.

    Error per element is ``|analytic - numeric| / max(|numeric|, 1e-8)``.
    Norm layers run in training mode so their batch statistics are checked too.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_model(config, seed)
        for name in params.learnable:
            if name.startswith("norm") or name.endswith(".bias"):
                params.arrays[name] = params.arrays[name] + rng.normal(0, 0.3, params[name].shape)
    if params.n_learnable() > 2000:
        raise NetError(f"grad_check is limited to 2000 parameters, got {params.n_learnable()}")
    if x is None:
        x = rng.normal(0, 1, size=(batch, config.in_channels, window_len))
    upstream = rng.normal(0, 1, size=(x.shape[0], config.embed_dim))

    def objective(p):
        emb, _ = forward_batch(p, x, training=True)
        return float(np.sum(upstream * emb))

    analytic = backprop(params, x, upstream)
    worst = 0.0
    for name in params.learnable:
        arr = params.arrays[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            f_plus = objective(params)
            arr[idx] = orig - h
            f_minus = objective(params)
            arr[idx] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            err = abs(analytic[name][idx] - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


@dataclass(eq=False)
class ModelCheckpoint:
    """One fold model. Parameters are rounded to float32 on construction so the
    on-disk format (float32) round-trips bit-exactly."""

    config: NetConfig
    seed: int
    params: ModelParams
    fold_index: int

    def __post_init__(self):
        if not 0 <= self.fold_index <= 3:
            raise NetError(f"fold_index must be in 0..3, got {self.fold_index}")
        arrays = {k: v.astype(np.float32).astype(np.float64) for k, v in self.params.arrays.items()}
        self.params = ModelParams(self.config, arrays)

    def header(self) -> dict:
        return {
            "config": {**asdict(self.config), "dilations": list(self.config.dilations)},
            "seed": self.seed,
            "fold_index": self.fold_index,
            "shapes": [[name, list(arr.shape)] for name, arr in self.params.arrays.items()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        payload = b"".join(arr.astype("<f4").tobytes() for arr in self.params.arrays.values())
        return head + b"\n\n" + payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelCheckpoint":
        head, sep, payload = raw.partition(b"\n\n")
        if not sep:
            raise NetError("checkpoint header not terminated by a blank line")
        meta = json.loads(head.decode("utf-8"))
        config = NetConfig.from_dict(meta["config"])
        arrays, offset = {}, 0
        for name, shape in meta["shapes"]:
            count = int(np.prod(shape))
            chunk = payload[offset:offset + 4 * count]
            if len(chunk) != 4 * count:
                raise NetError(f"checkpoint payload truncated at {name}")
            arrays[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float64)
            offset += 4 * count
        if offset != len(payload):
            raise NetError("checkpoint payload has trailing bytes")
        return cls(config, int(meta["seed"]), ModelParams(config, arrays), int(meta["fold_index"]))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())
