"""A small fully convolutional encoder/decoder network, written directly on
numpy with explicit backpropagation.

Architecture: S encoder stages (conv, ReLU, 2x max-pool), a decoder of
stride-2 transposed convolutions initialized to multilinear upsampling,
additive skip fusion through 1x1 convs, and a zero-initialized 1x1 head so a
freshly built network outputs an identically zero heatmap. The network is
used purely as an optimization parameterization: no training data, no
batching, one image pair at a time.

Parameter gradients are exact gradients of the surrogate cost given the
incoming error signal, so they check out against central finite differences
away from ReLU/pool kinks.
"""
from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, StaleCacheError

__all__ = [
    "NetworkConfig",
    "Network",
    "ActivationCache",
    "ParamGradients",
    "build_network",
    "forward",
    "backward",
    "sgd_step",
    "serialize_network",
    "deserialize_network",
]

ParamGradients = dict[str, np.ndarray]

_net_counter = itertools.count(1)

_UP_KERNEL = 4  # stride-2 transposed conv: kernel 4, padding 1 doubles dims
_UP_STRIDE = 2
_UP_PAD = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Shape of the heatmap network.

    skip_links names the encoder stages whose pooled features are fused into
    the decoder; the empty set is the pure-upsampling variant, one link per
    stage adds local detail back in.
    """

    spatial_rank: int = 2
    in_channels: int = 2
    stages: int = 2
    channels_per_stage: tuple[int, ...] = (8, 16)
    skip_links: frozenset[int] = frozenset({1})
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels_per_stage", tuple(int(c) for c in self.channels_per_stage))
        object.__setattr__(self, "skip_links", frozenset(int(s) for s in self.skip_links))
        if self.spatial_rank not in (2, 3):
            raise InputError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.in_channels < 1:
            raise InputError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.stages < 1:
            raise InputError(f"stages must be >= 1, got {self.stages}")
        if len(self.channels_per_stage) != self.stages:
            raise InputError(
                f"channels_per_stage has {len(self.channels_per_stage)} entries for {self.stages} stages"
            )
        if any(c < 1 for c in self.channels_per_stage):
            raise InputError("channel counts must be >= 1")
        allowed = set(range(1, self.stages))
        if not set(self.skip_links) <= allowed:
            raise InputError(f"skip_links {sorted(self.skip_links)} not within {sorted(allowed)}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InputError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")

    @property
    def scale(self) -> int:
        """Spatial dims must be divisible by this (2**stages)."""
        return 2 ** self.stages

    def to_dict(self) -> dict:
        return {
            "spatial_rank": self.spatial_rank,
            "in_channels": self.in_channels,
            "stages": self.stages,
            "channels_per_stage": list(self.channels_per_stage),
            "skip_links": sorted(self.skip_links),
            "kernel_size": self.kernel_size,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        return NetworkConfig(
            spatial_rank=d["spatial_rank"],
            in_channels=d["in_channels"],
            stages=d["stages"],
            channels_per_stage=tuple(d["channels_per_stage"]),
            skip_links=frozenset(d["skip_links"]),
            kernel_size=d["kernel_size"],
            seed=d["seed"],
        )


@dataclass(frozen=True, eq=False, repr=False)
class Network:
    """Immutable-in-use parameter set; sgd_step returns a successor."""

    config: NetworkConfig
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    version: int = field(default_factory=lambda: next(_net_counter))

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def __repr__(self) -> str:
        return f"Network(stages={self.config.stages}, params={self.param_count()}, version={self.version})"


@dataclass(frozen=True, eq=False, repr=False)
class ActivationCache:
    """Per-layer tensors retained from one forward pass, keyed to the exact
    network version that produced them."""

    net_version: int
    x: np.ndarray
    enc_in: list        # conv input per encoder stage
    enc_pre: list       # pre-activation per encoder stage (ReLU mask source)
    pool_idx: list      # argmax index within each 2**rank pooling block
    pooled: list        # pooled output per encoder stage
    dec_in: list        # input to each transposed conv, deepest first
    head_in: np.ndarray

    def __repr__(self) -> str:
        return f"ActivationCache(net_version={self.net_version})"


# ---------------------------------------------------------------------------
# correlation / pooling primitives


def _spec(rank: int):
    s = "abc"[:rank]
    k = "uvw"[:rank]
    return s, k


def _windows(x: np.ndarray, kshape: tuple[int, ...], stride: int = 1) -> np.ndarray:
    """Sliding windows over the spatial axes of (C, *S); shape (C, *So, *k)."""
    w = np.lib.stride_tricks.sliding_window_view(x, kshape, axis=tuple(range(1, x.ndim)))
    if stride != 1:
        sl = (slice(None),) + (slice(None, None, stride),) * (x.ndim - 1)
        w = w[sl]
    return w


def _corr(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """Cross-correlation of (Cin, *S) with weights (Cin, Cout, *k)."""
    rank = x.ndim - 1
    s, k = _spec(rank)
    win = _windows(x, w.shape[2:], stride)
    return np.einsum(f"i{s}{k},io{k}->o{s}", win, w, optimize=True)


def _corr_grad_w(x: np.ndarray, gy: np.ndarray, kshape: tuple[int, ...], stride: int = 1) -> np.ndarray:
    """Gradient of `_corr` output gy with respect to the weights."""
    rank = x.ndim - 1
    s, k = _spec(rank)
    win = _windows(x, kshape, stride)
    return np.einsum(f"i{s}{k},o{s}->io{k}", win, gy, optimize=True)


def _zero_pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, [(0, 0)] + [(p, p)] * (x.ndim - 1))


def _corr_grad_x(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of stride-1 `_corr` with respect to its (padded) input."""
    rank = gy.ndim - 1
    s, k = _spec(rank)
    kk = w.shape[2]
    wf = np.flip(w, axis=tuple(range(2, w.ndim)))
    gy_full = _zero_pad(gy, kk - 1)
    win = _windows(gy_full, w.shape[2:], 1)
    return np.einsum(f"o{s}{k},io{k}->i{s}", win, wf, optimize=True)


def _pad_edge(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, [(0, 0)] + [(p, p)] * (x.ndim - 1), mode="edge")


def _pad_edge_adjoint(g: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of `_pad_edge`: fold the replicated margins back onto the
    boundary samples, one axis at a time."""
    if p == 0:
        return g
    for axis in range(1, g.ndim):
        gm = np.moveaxis(g, axis, 0)
        core = gm[p:-p].copy()
        core[0] += gm[:p].sum(axis=0)
        core[-1] += gm[-p:].sum(axis=0)
        g = np.moveaxis(core, 0, axis)
    return g


def _maxpool(x: np.ndarray):
    """2x max pooling over every spatial axis of (C, *S); ties go to the
    lowest linear index. Returns (pooled, argmax within block)."""
    rank = x.ndim - 1
    c = x.shape[0]
    out_dims = tuple(n // 2 for n in x.shape[1:])
    shape = (c,)
    for n in out_dims:
        shape += (n, 2)
    xb = x.reshape(shape)
    # bring the block axes together: (C, *out, 2**rank)
    order = (0,) + tuple(1 + 2 * i for i in range(rank)) + tuple(2 + 2 * i for i in range(rank))
    xb = xb.transpose(order).reshape((c,) + out_dims + (2 ** rank,))
    idx = np.argmax(xb, axis=-1)
    pooled = np.take_along_axis(xb, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def _maxpool_adjoint(g: np.ndarray, idx: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    rank = g.ndim - 1
    c = in_shape[0]
    out_dims = g.shape[1:]
    blocks = np.zeros(g.shape + (2 ** rank,))
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    shape = (c,) + tuple(itertools.chain.from_iterable((n, 2) for n in out_dims))
    inv_order = np.argsort(
        (0,) + tuple(1 + 2 * i for i in range(rank)) + tuple(2 + 2 * i for i in range(rank))
    )
    blocks = blocks.reshape((c,) + tuple(out_dims) + (2,) * rank).transpose(tuple(inv_order))
    return blocks.reshape(in_shape)


def _zero_stuff(x: np.ndarray, stride: int) -> np.ndarray:
    dims = tuple(stride * (n - 1) + 1 for n in x.shape[1:])
    z = np.zeros((x.shape[0],) + dims)
    sl = (slice(None),) + (slice(None, None, stride),) * (x.ndim - 1)
    z[sl] = x
    return z


def _upconv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-2 transposed correlation, kernel 4, padding 1: doubles dims."""
    z = _zero_stuff(x, _UP_STRIDE)
    zp = _zero_pad(z, _UP_KERNEL - 1 - _UP_PAD)
    wf = np.flip(w, axis=tuple(range(2, w.ndim)))
    rank = x.ndim - 1
    s, k = _spec(rank)
    win = _windows(zp, w.shape[2:], 1)
    return np.einsum(f"i{s}{k},io{k}->o{s}", win, wf, optimize=True)


def _upconv_grad_x(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _corr(_zero_pad(gy, _UP_PAD), w, stride=_UP_STRIDE)


def _upconv_grad_w(x: np.ndarray, gy: np.ndarray, kshape: tuple[int, ...]) -> np.ndarray:
    rank = x.ndim - 1
    s, k = _spec(rank)
    win = _windows(_zero_pad(gy, _UP_PAD), kshape, _UP_STRIDE)
    return np.einsum(f"i{s},o{s}{k}->io{k}", x, win, optimize=True)


def _bias_shape(rank: int):
    return (slice(None),) + (None,) * rank


def _multilinear_kernel(rank: int) -> np.ndarray:
    """Interpolation kernel for factor-2 upsampling (1D taps 1/4,3/4,3/4,1/4)."""
    taps = np.array([0.25, 0.75, 0.75, 0.25])
    kern = taps
    for _ in range(rank - 1):
        kern = np.multiply.outer(kern, taps)
    return kern


# ---------------------------------------------------------------------------
# network construction and evaluation


def build_network(config: NetworkConfig) -> Network:
    """Deterministically initialize all parameters from config.seed.

    Encoder convs use scaled-uniform fan-in init with zero biases; transposed
    convs start as multilinear upsamplers; the head is all zeros, so the
    initial heatmap is exactly zero and the surrogate cost starts equal to
    the plain cost.
    """
    rng = np.random.default_rng(config.seed)
    rank = config.spatial_rank
    k = config.kernel_size
    ch = (config.in_channels,) + config.channels_per_stage
    params: dict[str, np.ndarray] = {}

    def uniform_fan_in(shape, fan_in):
        bound = math.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    for s in range(1, config.stages + 1):
        cin, cout = ch[s - 1], ch[s]
        shape = (cin, cout) + (k,) * rank
        params[f"enc{s}.w"] = uniform_fan_in(shape, cin * k ** rank)
        params[f"enc{s}.b"] = np.zeros(cout)

    kern = _multilinear_kernel(rank)
    dec_out = [0] * (config.stages + 1)
    for s in range(config.stages, 0, -1):
        cin = ch[s]
        cout = ch[s - 1] if s >= 2 else ch[1]
        dec_out[s - 1] = cout
        w = np.zeros((cin, cout) + (_UP_KERNEL,) * rank)
        for co in range(cout):
            w[co % cin, co] = kern
        params[f"up{s}.w"] = w
        params[f"up{s}.b"] = np.zeros(cout)

    for j in sorted(config.skip_links):
        cj = ch[j]
        params[f"fuse{j}.w"] = uniform_fan_in((cj, cj) + (1,) * rank, cj)
        params[f"fuse{j}.b"] = np.zeros(cj)

    head_in = dec_out[0]
    params["head.w"] = np.zeros((head_in, 1) + (1,) * rank)
    params["head.b"] = np.zeros(1)

    momentum = {k_: np.zeros_like(v) for k_, v in params.items()}
    return Network(config=config, params=params, momentum=momentum)


def _check_input(config: NetworkConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == config.spatial_rank:
        x = x[None]
    if x.ndim != config.spatial_rank + 1:
        raise InputError(f"input must be (channels, *spatial) with rank {config.spatial_rank}")
    if x.shape[0] != config.in_channels:
        raise InputError(f"input has {x.shape[0]} channels, network expects {config.in_channels}")
    scale = config.scale
    if any(n % scale != 0 for n in x.shape[1:]):
        raise InputError(f"spatial dims {x.shape[1:]} must be divisible by {scale}")
    return x


def forward(net: Network, x: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
    """Evaluate the heatmap for a (in_channels, *spatial) input.

    Returns (h, cache) where h has the input's spatial dims and the cache
    holds everything `backward` needs.
    """
    cfg = net.config
    x = _check_input(cfg, x)
    pad = (cfg.kernel_size - 1) // 2
    rank = cfg.spatial_rank
    bsl = _bias_shape(rank)

    a = x
    enc_in, enc_pre, pool_idx, pooled = [], [], [], []
    for s in range(1, cfg.stages + 1):
        enc_in.append(a)
        z = _corr(_pad_edge(a, pad), net.params[f"enc{s}.w"]) + net.params[f"enc{s}.b"][bsl]
        enc_pre.append(z)
        r = np.maximum(z, 0.0)
        p, idx = _maxpool(r)
        pool_idx.append(idx)
        pooled.append(p)
        a = p

    d = a
    dec_in = []
    for s in range(cfg.stages, 0, -1):
        dec_in.append(d)
        d = _upconv(d, net.params[f"up{s}.w"]) + net.params[f"up{s}.b"][bsl]
        j = s - 1
        if j in cfg.skip_links:
            f = _corr(pooled[j - 1], net.params[f"fuse{j}.w"]) + net.params[f"fuse{j}.b"][bsl]
            d = d + f

    h = _corr(d, net.params["head.w"]) + net.params["head.b"][bsl]
    cache = ActivationCache(
        net_version=net.version,
        x=x,
        enc_in=enc_in,
        enc_pre=enc_pre,
        pool_idx=pool_idx,
        pooled=pooled,
        dec_in=dec_in,
        head_in=d,
    )
    return h[0], cache


def backward(net: Network, cache: ActivationCache, a2: np.ndarray, voxel_volume: float = 1.0) -> ParamGradients:
    """Gradients of the surrogate cost with respect to every parameter.

    `a2` is the error signal at the heatmap; it is scaled by `voxel_volume`
    here so the results are gradients of the voxel-volume-discretized cost.
    """
    if cache.net_version != net.version:
        raise StaleCacheError(
            f"activation cache from network version {cache.net_version} "
            f"does not match network version {net.version}"
        )
    cfg = net.config
    rank = cfg.spatial_rank
    a2 = np.asarray(a2, dtype=np.float64)
    if a2.shape != cache.head_in.shape[1:]:
        raise InputError(f"error signal shape {a2.shape} != heatmap shape {cache.head_in.shape[1:]}")
    pad = (cfg.kernel_size - 1) // 2
    spatial_axes = tuple(range(1, rank + 1))
    grads: ParamGradients = {}

    gy = (a2 * voxel_volume)[None]
    grads["head.w"] = _corr_grad_w(cache.head_in, gy, (1,) * rank)
    grads["head.b"] = gy.sum(axis=spatial_axes)
    g_d = _corr_grad_x(gy, net.params["head.w"])

    # decoder, shallow to deep; skip gradients accumulate onto pooled features
    g_pool = [None] * (cfg.stages + 1)
    for s in range(1, cfg.stages + 1):
        j = s - 1
        if j in cfg.skip_links:
            grads[f"fuse{j}.w"] = _corr_grad_w(cache.pooled[j - 1], g_d, (1,) * rank)
            grads[f"fuse{j}.b"] = g_d.sum(axis=spatial_axes)
            g_pool[j] = _corr_grad_x(g_d, net.params[f"fuse{j}.w"])
        x_up = cache.dec_in[cfg.stages - s]
        grads[f"up{s}.w"] = _upconv_grad_w(x_up, g_d, (_UP_KERNEL,) * rank)
        grads[f"up{s}.b"] = g_d.sum(axis=spatial_axes)
        g_d = _upconv_grad_x(g_d, net.params[f"up{s}.w"])
    g_pool[cfg.stages] = g_d

    # encoder, deep to shallow
    g_carry = None
    for s in range(cfg.stages, 0, -1):
        g_p = g_pool[s]
        if g_carry is not None:
            g_p = g_p + g_carry if g_p is not None else g_carry
        r_shape = cache.enc_pre[s - 1].shape
        g_r = _maxpool_adjoint(g_p, cache.pool_idx[s - 1], r_shape)
        g_z = g_r * (cache.enc_pre[s - 1] > 0.0)
        grads[f"enc{s}.w"] = _corr_grad_w(_pad_edge(cache.enc_in[s - 1], pad), g_z, (cfg.kernel_size,) * rank)
        grads[f"enc{s}.b"] = g_z.sum(axis=spatial_axes)
        g_carry = _pad_edge_adjoint(_corr_grad_x(g_z, net.params[f"enc{s}.w"]), pad)

    return grads


def sgd_step(
    net: Network,
    grads: ParamGradients,
    lr: float,
    momentum: float = 0.9,
    clip_norm: float = 1.0,
) -> Network:
    """One momentum-SGD update with global gradient-norm clipping; returns a
    successor network, never mutating the input."""
    if lr <= 0:
        raise InputError(f"lr must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise InputError(f"momentum must be in [0, 1), got {momentum}")
    if clip_norm <= 0:
        raise InputError(f"clip_norm must be > 0, got {clip_norm}")
    if set(grads) != set(net.params):
        missing = set(net.params) ^ set(grads)
        raise InputError(f"gradient keys do not match parameters: {sorted(missing)}")
    sq = 0.0
    for k, g in grads.items():
        if g.shape != net.params[k].shape:
            raise InputError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise InputError(f"non-finite gradient for {k}")
        sq += float(np.sum(g * g))
    norm = math.sqrt(sq)
    scale = clip_norm / norm if norm > clip_norm else 1.0

    new_params, new_momentum = {}, {}
    for k, p in net.params.items():
        b = momentum * net.momentum[k] + grads[k] * scale
        new_momentum[k] = b
        new_params[k] = p - lr * b
    return Network(config=net.config, params=new_params, momentum=new_momentum)


# ---------------------------------------------------------------------------
# checkpoint serialization

_MAGIC = b"HRFCNN01"


def serialize_network(net: Network) -> bytes:
    """Parameters as a little-endian float32 blob behind a versioned header
    (magic, config echo). Momentum buffers are not persisted."""
    header = {
        "config": net.config.to_dict(),
        "params": [[k, list(net.params[k].shape)] for k in sorted(net.params)],
    }
    hjson = json.dumps(header, sort_keys=True).encode()
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", len(hjson))
    out += hjson
    for k in sorted(net.params):
        out += net.params[k].astype("<f4").tobytes()
    return bytes(out)


def deserialize_network(blob: bytes) -> Network:
    if blob[: len(_MAGIC)] != _MAGIC:
        raise InputError(f"bad network blob magic {blob[:8]!r}")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    header = json.loads(blob[off : off + hlen].decode())
    off += hlen
    config = NetworkConfig.from_dict(header["config"])
    params: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += 4 * n
        params[name] = arr.reshape(shape)
    if off != len(blob):
        raise InputError(f"network blob has {len(blob) - off} trailing bytes")
    momentum = {k: np.zeros_like(v) for k, v in params.items()}
    return Network(config=config, params=params, momentum=momentum)
