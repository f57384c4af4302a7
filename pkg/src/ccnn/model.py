"""Trunk-plus-four-branch cascade network in patch mode.

Stage ``j`` is trunk block ``j`` followed by branch ``j``.  Blocks 1-3 are
conv -> ReLU -> 3x3/2 max pool, block 4 is conv -> ReLU.  Branch ``j`` taps the
output of block ``j`` and is a 3x3 conv with two filters, a global average
pool and a two-way softmax.  Channel 1 of the softmax is "player".
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor_ops import (
    ConvKernel,
    PoolSpec,
    SizingError,
    conv_backward,
    conv_forward,
    conv_global_average_backward,
    out_size,
    pool_backward,
    pool_forward,
    relu,
    relu_backward,
    softmax2,
    softmax2_backward,
)

K = 4
TRUNK_POOL = PoolSpec("max", 3, 3, stride=2, dilation=1)
PLAYER = 1

TABLE1_CONFIGS = {
    "8/8/8/8": (8, 8, 8, 8),
    "8/16/16/16": (8, 16, 16, 16),
    "16/16/16/16": (16, 16, 16, 16),
    "16/16/32/32": (16, 16, 32, 32),
}


@dataclass(frozen=True)
class CascadeConfig:
    trunk_filters: tuple = (16, 16, 16, 16)
    branch_filters: tuple = (2, 2, 2, 2)
    patch_size: int = 64
    input_channels: int = 3

    def __post_init__(self):
        if len(self.trunk_filters) != K or any(int(f) <= 0 for f in self.trunk_filters):
            raise ValueError(f"trunk_filters must be {K} positive integers, got {self.trunk_filters}")
        if tuple(self.branch_filters) != (2,) * K:
            raise ValueError("branch heads are two-way classifiers; branch_filters must be (2, 2, 2, 2)")
        if self.patch_size <= 0 or self.input_channels != 3:
            raise ValueError("patch_size must be positive and input_channels must be 3")

    @classmethod
    def parse(cls, text, patch_size=64):
        """Build from a 'a/b/c/d' trunk filter string."""
        parts = tuple(int(p) for p in text.split("/"))
        return cls(trunk_filters=parts, patch_size=patch_size)


@dataclass(frozen=True)
class LayerShape:
    name: str
    kind: str  # conv | maxpool | avgpool
    in_size: int
    out_size: int
    kh: int
    kw: int
    in_channels: int
    out_channels: int
    stride: int = 1

    @property
    def macs(self):
        if self.kind == "conv":
            return self.out_size ** 2 * self.kh * self.kw * self.in_channels * self.out_channels
        return self.out_size ** 2 * self.kh * self.kw * self.out_channels


def stage_layer_shapes(config):
    """Patch-mode layer geometry per stage, validated under VALID arithmetic.

    Returns a list of K lists; stage j lists trunk block j then branch j.
    """
    size = config.patch_size
    channels = config.input_channels
    stages = []
    for j in range(K):
        f = config.trunk_filters[j]
        layers = []

        def add(layer):
            if layer.out_size < 1:
                raise SizingError(
                    f"patch size {config.patch_size} too small: layer {layer.name} "
                    f"gets a {layer.in_size}x{layer.in_size} input"
                )
            layers.append(layer)

        add(LayerShape(f"C{j + 1}", "conv", size, out_size(size, 3), 3, 3, channels, f))
        size = layers[-1].out_size
        if j < K - 1:
            add(LayerShape(f"P{j + 1}", "maxpool", size, out_size(size, 3, 1, 2), 3, 3, f, f, 2))
            size = layers[-1].out_size
        add(LayerShape(f"B{j + 1}", "conv", size, out_size(size, 3), 3, 3, f, 2))
        g = layers[-1].out_size
        add(LayerShape(f"GAP{j + 1}", "avgpool", g, 1, g, g, 2, 2))
        stages.append(layers)
        channels = f
    return stages


def stage_cost(net_or_config, j):
    """MAC count of the layers first evaluated at stage ``j`` (1-based)."""
    config = getattr(net_or_config, "config", net_or_config)
    if not 1 <= j <= K:
        raise ValueError(f"stage index must be in 1..{K}, got {j}")
    return sum(layer.macs for layer in stage_layer_shapes(config)[j - 1])


def _init_kernel(rng, kh, kw, cin, cout):
    # He-normal: keeps ReLU activation variance roughly constant with depth
    w = (rng.standard_normal((kh, kw, cin, cout)) * np.sqrt(2.0 / (kh * kw * cin))).astype(np.float32)
    return ConvKernel(w, np.zeros(cout, dtype=np.float32))


@dataclass
class CascadeNetwork:
    config: CascadeConfig
    trunk: list
    branches: list
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(K))

    @property
    def stage_costs(self):
        return np.array([stage_cost(self.config, j) for j in range(1, K + 1)], dtype=np.int64)

    @property
    def branch_extents(self):
        """Spatial size of each branch conv output in patch mode (the GAP window)."""
        return [stage[-1].kh for stage in stage_layer_shapes(self.config)]

    @property
    def dtype(self):
        return self.trunk[0].weights.dtype

    def parameters(self):
        """Name -> array mapping; arrays are the live storage."""
        params = {}
        for prefix, kernels in (("trunk", self.trunk), ("branch", self.branches)):
            for j, k in enumerate(kernels, start=1):
                params[f"{prefix}{j}.w"] = k.weights
                params[f"{prefix}{j}.b"] = k.bias
        return params

    def parameter_count(self):
        return int(sum(a.size for a in self.parameters().values()))

    def astype(self, dtype):
        return CascadeNetwork(
            self.config,
            [k.astype(dtype) for k in self.trunk],
            [k.astype(dtype) for k in self.branches],
            self.thresholds.copy(),
        )

    def copy(self):
        return self.astype(self.dtype)


def build_network(config, seed=0):
    stage_layer_shapes(config)  # raises on an impossible patch size
    rng = np.random.default_rng(seed)
    trunk, cin = [], config.input_channels
    for f in config.trunk_filters:
        trunk.append(_init_kernel(rng, 3, 3, cin, f))
        cin = f
    branches = [_init_kernel(rng, 3, 3, f, 2) for f in config.trunk_filters]
    return CascadeNetwork(config, trunk, branches)


# ---------------------------------------------------------------------------
# batched patch-mode forward / backward


def gap_spec(extent):
    return PoolSpec("average", extent, extent, 1, 1)


def block_forward(net, j, x, cache=None):
    """Trunk block j (1-based) on input x."""
    if cache is not None:
        pre, cols = conv_forward(x, net.trunk[j - 1], keep_cols=True)
    else:
        pre, cols = conv_forward(x, net.trunk[j - 1]), None
    act = relu(pre)
    if j < K:
        out, routing = pool_forward(act, TRUNK_POOL, record=cache is not None)
    else:
        out, routing = act, None
    if cache is not None:
        cache[f"block{j}"] = (x, cols, pre, routing)
    return out


def branch_forward(net, j, feat, cache=None):
    """Branch j on its tap feature; returns the player probability per sample."""
    logits_map = conv_forward(feat, net.branches[j - 1])
    extent = logits_map.shape[-2]
    logits, routing = pool_forward(logits_map, gap_spec(extent))
    probs = softmax2(logits[..., 0, 0, :])
    if cache is not None:
        cache[f"branch{j}"] = (feat, probs)
    return probs[..., PLAYER]


def forward_stages(net, x, first=1, last=K, cache=None):
    """Run stages ``first..last`` where ``x`` is the input of block ``first``.

    Returns ``(probs, tap)``: ``probs`` has one column per stage run and
    ``tap`` is the output of block ``last``.
    """
    cols = []
    for j in range(first, last + 1):
        x = block_forward(net, j, x, cache)
        cols.append(branch_forward(net, j, x, cache))
    return np.stack(cols, axis=-1), x


def backward_stages(net, cache, d_probs, first=1, last=K, need_input_grad=False):
    """Back-propagate dL/dp (one column per stage ``first..last``) to parameters."""
    grads = {}
    d_tap = None
    for j in range(last, first - 1, -1):
        feat, probs = cache[f"branch{j}"]
        d_sm = np.zeros_like(probs)
        d_sm[..., PLAYER] = d_probs[..., j - first]
        d_logits = softmax2_backward(probs, d_sm)
        # the average covers the whole conv output, so both layers fold into one step
        d_feat, grads[f"branch{j}.w"], grads[f"branch{j}.b"] = conv_global_average_backward(
            feat, net.branches[j - 1], d_logits
        )
        if d_tap is not None:
            d_feat = d_feat + d_tap
        x, cols, pre, routing = cache[f"block{j}"]
        d_act = pool_backward(routing, d_feat, TRUNK_POOL) if routing is not None else d_feat
        d_pre = relu_backward(pre, d_act)
        d_tap, grads[f"trunk{j}.w"], grads[f"trunk{j}.b"] = conv_backward(
            x, net.trunk[j - 1], d_pre, input_grad=(j > first or need_input_grad), cols=cols
        )
    return grads, d_tap


def stage_probabilities(net, patches, batch_size=256):
    """All-stage player probabilities, shape (N, K)."""
    patches = np.asarray(patches)
    if patches.ndim == 3:
        return stage_probabilities(net, patches[None], batch_size)[0]
    _check_patch_dims(net, patches)
    out = [forward_stages(net, patches[s:s + batch_size])[0] for s in range(0, len(patches), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, K))


def _check_patch_dims(net, patches):
    p = net.config.patch_size
    if patches.shape[-3:] != (p, p, net.config.input_channels):
        raise SizingError(
            f"patch must be {p}x{p}x{net.config.input_channels}, got {patches.shape[-3:]}"
        )


@dataclass
class StageProbs:
    probs: np.ndarray
    stages_evaluated: int
    verdict: str  # "positive" | "negative"
    final_score: float


def forward_patch(net, patch, mode="early_exit"):
    """Classify a single patch with or without early exit."""
    if mode not in ("all_stages", "early_exit"):
        raise ValueError(f"mode must be 'all_stages' or 'early_exit', got {mode!r}")
    patch = np.asarray(patch)
    _check_patch_dims(net, patch)
    x = patch[None]
    probs = []
    passed = True
    for j in range(1, K + 1):
        x = block_forward(net, j, x)
        p = float(branch_forward(net, j, x)[0])
        probs.append(p)
        if p <= net.thresholds[j - 1]:
            passed = False
            if mode == "early_exit":
                break
    probs = np.array(probs)
    score = float(np.prod(probs)) if passed else 0.0
    return StageProbs(probs, len(probs), "positive" if passed else "negative", score)


# ---------------------------------------------------------------------------
# model file

MAGIC = b"CCNN"
VERSION = 1
FLAG_THRESHOLDS = 1
CONV, MAXPOOL, AVGPOOL, RELU, SOFTMAX2 = range(5)
_HEADER = struct.Struct("<4sHHHBH")
_RECORD = struct.Struct("<BHHHHHH")


class ModelFormatError(ValueError):
    pass


class NotACascadeModel(ModelFormatError):
    pass


class UnsupportedVersion(ModelFormatError):
    pass


class TruncatedModel(ModelFormatError):
    pass


def layer_records(config):
    """Declaration-order layer records ``(type, inC, outC, kh, kw, stride, dilation)``."""
    recs = []
    cin = config.input_channels
    for j, f in enumerate(config.trunk_filters):
        recs.append((CONV, cin, f, 3, 3, 1, 1))
        recs.append((RELU, f, f, 1, 1, 1, 1))
        if j < K - 1:
            recs.append((MAXPOOL, f, f, 3, 3, 2, 1))
        cin = f
    for f, extent in zip(config.trunk_filters, (s[-1].kh for s in stage_layer_shapes(config))):
        recs.append((CONV, f, 2, 3, 3, 1, 1))
        recs.append((AVGPOOL, 2, 2, extent, extent, 1, 1))
        recs.append((SOFTMAX2, 2, 2, 1, 1, 1, 1))
    return recs


def weight_payload(net):
    """Little-endian binary32 weights in declaration order."""
    parts = []
    for k in list(net.trunk) + list(net.branches):
        parts.append(np.asarray(k.weights, dtype="<f4").tobytes())
        parts.append(np.asarray(k.bias, dtype="<f4").tobytes())
    return b"".join(parts)


def dumps_model(net):
    recs = layer_records(net.config)
    thresholds = np.asarray(net.thresholds, dtype=np.float64)
    flags = FLAG_THRESHOLDS if np.any(thresholds != 0) else 0
    out = [_HEADER.pack(MAGIC, VERSION, flags, net.config.patch_size, K, len(recs))]
    out += [_RECORD.pack(*r) for r in recs]
    out.append(weight_payload(net))
    if flags & FLAG_THRESHOLDS:
        out.append(thresholds.astype("<f8").tobytes())
    return b"".join(out)


def loads_model(data):
    if len(data) < 4 or data[:4] != MAGIC:
        raise NotACascadeModel("not a cascade model (bad magic bytes)")
    if len(data) < _HEADER.size:
        raise TruncatedModel("truncated model header")
    _, version, flags, patch_size, k, n_layers = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported model version {version}")
    if k != K:
        raise ModelFormatError(f"model has {k} stages; only {K} are supported")
    pos = _HEADER.size
    if len(data) < pos + n_layers * _RECORD.size:
        raise TruncatedModel("truncated layer records")
    recs = [_RECORD.unpack_from(data, pos + i * _RECORD.size) for i in range(n_layers)]
    pos += n_layers * _RECORD.size
    trunk_filters = tuple(r[2] for r in recs if r[0] == CONV)[:K]
    try:
        config = CascadeConfig(trunk_filters=trunk_filters, patch_size=patch_size)
        expected = layer_records(config)
    except (ValueError, SizingError) as exc:
        raise ModelFormatError(f"invalid layer layout: {exc}") from None
    if [tuple(r) for r in recs] != expected:
        raise ModelFormatError("layer records do not describe a supported cascade layout")

    def take(count):
        nonlocal pos
        nbytes = 4 * count
        if len(data) < pos + nbytes:
            raise TruncatedModel("truncated weight payload")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32)
        pos += nbytes
        return arr

    kernels = []
    for r in recs:
        if r[0] != CONV:
            continue
        _, cin, cout, kh, kw, _, _ = r
        w = take(kh * kw * cin * cout).reshape(kh, kw, cin, cout)
        kernels.append(ConvKernel(w, take(cout)))
    thresholds = np.zeros(K)
    if flags & FLAG_THRESHOLDS:
        if len(data) < pos + 8 * K:
            raise TruncatedModel("truncated threshold block")
        thresholds = np.frombuffer(data, dtype="<f8", count=K, offset=pos).astype(np.float64)
        pos += 8 * K
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} trailing bytes after model payload")
    return CascadeNetwork(config, kernels[:K], kernels[K:], thresholds)


def save_model(net, destination):
    with open(destination, "wb") as fh:
        fh.write(dumps_model(net))


def load_model(source):
    with open(source, "rb") as fh:
        return loads_model(fh.read())
