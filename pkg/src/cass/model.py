"""ShuffleNet V2 style classifier assembled from the operators in ``cass.tensor``.

Layers are small objects with ``forward(x, train)`` and ``backward(dout)``;
each forward caches what its backward needs and each backward *adds* into
the owning ``Parameter.grad`` so that gradient accumulation is free.
"""
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from cass import tensor as T
from cass.tensor import DimensionError, Parameter

MAGIC = b"CASSW1\0\0"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised for unreadable or inconsistent weight files."""


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    downsample: bool = False
    shuffle_groups: int = 2

    def __post_init__(self):
        if self.out_channels % 2:
            raise DimensionError(f"out_channels must be even, got {self.out_channels}")
        if not self.downsample:
            if self.in_channels != self.out_channels:
                raise DimensionError(
                    f"basic block needs in_channels == out_channels, got "
                    f"{self.in_channels} != {self.out_channels}")
            if self.in_channels % 2:
                raise DimensionError(f"basic block needs an even channel count, got {self.in_channels}")
        if self.out_channels % self.shuffle_groups:
            raise DimensionError(
                f"out_channels {self.out_channels} not divisible by shuffle_groups {self.shuffle_groups}")


@dataclass(frozen=True)
class StemSpec:
    out_channels: int = 24
    kernel: int = 3
    stride: int = 2
    pool: bool = True


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (1, 64, 64)
    stem: StemSpec = field(default_factory=StemSpec)
    stages: tuple = ((2, 48), (2, 96))
    num_classes: int = 3
    seed: int = 0
    shuffle_groups: int = 2

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_shape=tuple(d["input_shape"]),
            stem=StemSpec(**d["stem"]),
            stages=tuple(tuple(s) for s in d["stages"]),
            num_classes=int(d["num_classes"]),
            seed=int(d["seed"]),
            shuffle_groups=int(d.get("shuffle_groups", 2)),
        )

    def block_specs(self):
        specs = []
        cin = self.stem.out_channels
        for count, cout in self.stages:
            specs.append(BlockSpec(cin, cout, True, self.shuffle_groups))
            specs.extend(BlockSpec(cout, cout, False, self.shuffle_groups)
                         for _ in range(count - 1))
            cin = cout
        return specs


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

class Conv:
    def __init__(self, name, cin, cout, k, rng, dtype, stride=1, padding=0):
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter(f"{name}.weight",
                                (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype))
        self.stride, self.padding = stride, padding

    def params(self):
        return [self.weight]

    def forward(self, x, train):
        out, self.cache = T.conv2d(x, self.weight.value, None, self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw, _ = T.conv2d_backward(dout, self.cache)
        self.weight.grad += dw
        return dx


class DWConv:
    def __init__(self, name, channels, k, rng, dtype, stride=1):
        std = np.sqrt(2.0 / (k * k))
        self.weight = Parameter(f"{name}.weight",
                                (rng.standard_normal((channels, 1, k, k)) * std).astype(dtype))
        self.stride, self.padding = stride, k // 2

    def params(self):
        return [self.weight]

    def forward(self, x, train):
        out, self.cache = T.depthwise_conv2d(x, self.weight.value, self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw = T.depthwise_conv2d_backward(dout, self.cache)
        self.weight.grad += dw
        return dx


class BatchNorm:
    def __init__(self, name, channels, dtype, momentum=0.1, eps=1e-5):
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.name, self.momentum, self.eps = name, momentum, eps

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x, train):
        out, self.cache = T.batch_norm(x, self.gamma.value, self.beta.value,
                                       self.running_mean, self.running_var, train,
                                       self.momentum, self.eps)
        return out

    def backward(self, dout):
        dx, dgamma, dbeta = T.batch_norm_backward(dout, self.cache)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class ReLU:
    def params(self):
        return []

    def forward(self, x, train):
        out, self.mask = T.relu(x)
        return out

    def backward(self, dout):
        return T.relu_backward(dout, self.mask)


class MaxPool:
    def __init__(self, k=3, stride=2, padding=1):
        self.k, self.stride, self.padding = k, stride, padding

    def params(self):
        return []

    def forward(self, x, train):
        out, self.cache = T.max_pool(x, self.k, self.stride, self.padding)
        return out

    def backward(self, dout):
        return T.max_pool_backward(dout, self.cache)


class Sequential:
    def __init__(self, *layers):
        self.layers = list(layers)

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x, train):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def _pointwise_bn(name, cin, cout, rng, dtype, act=True):
    layers = [Conv(f"{name}.conv", cin, cout, 1, rng, dtype), BatchNorm(f"{name}.bn", cout, dtype)]
    if act:
        layers.append(ReLU())
    return layers


def _depthwise_bn(name, channels, stride, rng, dtype):
    return [DWConv(f"{name}.dwconv", channels, 3, rng, dtype, stride=stride),
            BatchNorm(f"{name}.dwbn", channels, dtype)]


class BasicBlock:
    """Split, transform one half, concat, shuffle.  Shape preserving."""

    def __init__(self, name, spec, rng, dtype):
        if spec.downsample:
            raise ValueError("BasicBlock requires spec.downsample == False")
        self.spec = spec
        mid = spec.out_channels // 2
        self.branch = Sequential(
            *_pointwise_bn(f"{name}.pw1", mid, mid, rng, dtype),
            *_depthwise_bn(name, mid, 1, rng, dtype),
            *_pointwise_bn(f"{name}.pw2", mid, mid, rng, dtype))

    def params(self):
        return self.branch.params()

    def forward(self, x, train):
        if x.shape[1] != self.spec.in_channels:
            raise DimensionError(f"block expects C={self.spec.in_channels}, got {x.shape[1]}")
        x1, x2 = T.channel_split(x)
        out = T.concat_channels(x1, self.branch.forward(x2, train))
        return T.channel_shuffle(out, self.spec.shuffle_groups)

    def backward(self, dout):
        d = T.channel_shuffle_backward(dout, self.spec.shuffle_groups)
        half = d.shape[1] // 2
        d1, d2 = T.concat_channels_backward(d, half)
        return T.concat_channels(d1, self.branch.backward(d2))


class DownsampleBlock:
    """Both branches see the full input and halve H and W."""

    def __init__(self, name, spec, rng, dtype):
        if not spec.downsample:
            raise ValueError("DownsampleBlock requires spec.downsample == True")
        self.spec = spec
        cin, mid = spec.in_channels, spec.out_channels // 2
        self.left = Sequential(
            *_depthwise_bn(f"{name}.left", cin, 2, rng, dtype),
            *_pointwise_bn(f"{name}.left.pw", cin, mid, rng, dtype))
        self.right = Sequential(
            *_pointwise_bn(f"{name}.right.pw1", cin, mid, rng, dtype),
            *_depthwise_bn(f"{name}.right", mid, 2, rng, dtype),
            *_pointwise_bn(f"{name}.right.pw2", mid, mid, rng, dtype))

    def params(self):
        return self.left.params() + self.right.params()

    def forward(self, x, train):
        if x.shape[1] != self.spec.in_channels:
            raise DimensionError(f"block expects C={self.spec.in_channels}, got {x.shape[1]}")
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise DimensionError(f"downsample block needs H, W >= 2, got {x.shape[2:]}")
        out = T.concat_channels(self.left.forward(x, train), self.right.forward(x, train))
        return T.channel_shuffle(out, self.spec.shuffle_groups)

    def backward(self, dout):
        d = T.channel_shuffle_backward(dout, self.spec.shuffle_groups)
        d1, d2 = T.concat_channels_backward(d, d.shape[1] // 2)
        return self.left.backward(d1) + self.right.backward(d2)


def basic_block_forward(x, block, train=False):
    return block.forward(x, train)


def downsample_block_forward(x, block, train=False):
    return block.forward(x, train)


# ----------------------------------------------------------------------------
# model
# ----------------------------------------------------------------------------

class Model:
    def __init__(self, config=None, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(self.config.seed)
        cfg = self.config
        cin = cfg.input_shape[0]
        stem = cfg.stem
        stem_layers = [Conv("stem.conv", cin, stem.out_channels, stem.kernel, rng, dtype,
                            stride=stem.stride, padding=stem.kernel // 2),
                       BatchNorm("stem.bn", stem.out_channels, dtype), ReLU()]
        if stem.pool:
            stem_layers.append(MaxPool(3, 2, 1))
        self.stem = Sequential(*stem_layers)
        self.blocks = []
        stage_no, block_no = 0, 0
        for spec in cfg.block_specs():
            if spec.downsample:
                stage_no, block_no = stage_no + 1, 0
            else:
                block_no += 1
            name = f"stage{stage_no}.block{block_no}"
            cls = DownsampleBlock if spec.downsample else BasicBlock
            self.blocks.append(cls(name, spec, rng, dtype))
        feat = cfg.stages[-1][1] if cfg.stages else stem.out_channels
        self.fc_weight = Parameter("fc.weight",
                                   (rng.standard_normal((cfg.num_classes, feat)) * 0.01).astype(dtype))
        self.fc_bias = Parameter("fc.bias", np.zeros(cfg.num_classes, dtype=dtype))
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    def _modules(self):
        return [self.stem, *self.blocks]

    def parameters(self):
        ps = [p for m in self._modules() for p in m.params()]
        return ps + [self.fc_weight, self.fc_bias]

    def batchnorms(self):
        found = []

        def walk(obj):
            if isinstance(obj, BatchNorm):
                found.append(obj)
            elif isinstance(obj, Sequential):
                for layer in obj.layers:
                    walk(layer)
            elif isinstance(obj, BasicBlock):
                walk(obj.branch)
            elif isinstance(obj, DownsampleBlock):
                walk(obj.left)
                walk(obj.right)

        for m in self._modules():
            walk(m)
        return found

    def buffers(self):
        out = {}
        for bn in self.batchnorms():
            out.update(bn.buffers())
        return out

    def num_parameters(self):
        return sum(p.value.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        """Copies of every parameter and buffer, keyed by name."""
        state = {p.name: p.value.copy() for p in self.parameters()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state):
        targets = {p.name: p.value for p in self.parameters()}
        targets.update(self.buffers())
        missing = set(targets) - set(state)
        if missing:
            raise FormatError(f"missing entries: {sorted(missing)[:5]}")
        for name, arr in targets.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise FormatError(f"shape of {name}: file {src.shape} != model {arr.shape}")
            arr[...] = src

    def forward(self, x, train=False):
        """Logits of shape ``(N, num_classes)``."""
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise DimensionError(
                f"batch shape {x.shape} does not match (N, *{tuple(self.config.input_shape)})")
        x = np.asarray(x, dtype=self.dtype)
        for m in self._modules():
            x = m.forward(x, train)
        pooled, self._gap_shape = T.global_avg_pool(x)
        feats = pooled.reshape(pooled.shape[0], -1)
        logits, self._fc_cache = T.linear(feats, self.fc_weight.value, self.fc_bias.value)
        return logits

    __call__ = forward

    def backward(self, dlogits):
        """Backpropagates ``dlogits``; accumulates parameter grads, returns d(input)."""
        dfeat, dw, db = T.linear_backward(dlogits, self._fc_cache)
        self.fc_weight.grad += dw
        self.fc_bias.grad += db
        d = T.global_avg_pool_backward(dfeat.reshape(dfeat.shape + (1, 1)), self._gap_shape)
        for m in reversed(self._modules()):
            d = m.backward(d)
        return d

    def predict_proba(self, x, batch_size=256):
        out = []
        for i in range(0, len(x), batch_size):
            out.append(T.softmax(self.forward(x[i:i + batch_size], train=False)))
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))


def model_forward(model, batch):
    return model.forward(batch, train=False)


# ----------------------------------------------------------------------------
# CASS-W1 weight files
# ----------------------------------------------------------------------------

def save_weights(model, path):
    entries, chunks, offset = [], [], 0
    for name, arr in model.state_dict().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = json.dumps({"version": FORMAT_VERSION, "config": model.config.to_dict(),
                         "parameters": entries}, sort_keys=True).encode("utf-8")
    blob = (MAGIC + struct.pack("<I", len(header)) + header + payload
            + struct.pack("<I", zlib.crc32(payload)))
    with open(path, "wb") as f:
        f.write(blob)


def load_weights(path, dtype=np.float32):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a CASS-W1 file (bad magic or too short)")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    hstart = len(MAGIC) + 4
    if hstart + hlen + 4 > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header: {e}") from None
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unknown version {header.get('version')!r}")
    payload = blob[hstart + hlen:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) * 4 for e in header["parameters"])
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header describes {expected}")
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad config in header: {e}") from None
    state = {}
    for e in header["parameters"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"])
    model = Model(config, dtype=dtype)
    model.load_state_dict(state)
    return model
