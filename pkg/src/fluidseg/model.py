"""UNet-style segmentation model with per-scale feature taps and output heads.

The decoder exposes one feature tap per scale: tap 0 is the bottleneck
(coarsest), tap h the full-resolution decoder output, with h equal to the
configured depth.  Output heads of different roles attach to those taps:

  std       head on the full-resolution tap; drives inference
  pyramid   one head per tap for multi-scale supervision
  mil       image-level classifier head on the pooled finest tap
  mil_deep  image-level classifier heads on every pooled tap

Heads never resample; each predicts at its tap's resolution.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ConfigError, FormatError

HEAD_ROLES = ("std", "pyramid", "mil", "mil_deep")

_FSEG_MAGIC = b"FSEG"
_FSEG_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 4  # foreground classes + one background channel
    depth: int = 2
    base_channels: int = 8
    input_h: int = 64
    input_w: int = 64

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2 (one class + background)")
        if self.depth < 0 or self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("depth, base_channels and in_channels must be positive")
        step = 1 << self.depth
        if self.input_h % step or self.input_w % step:
            raise ConfigError(
                f"input {self.input_h}x{self.input_w} not divisible by 2^depth={step}")

    def tap_channels(self) -> list:
        """Channel count of taps f_0..f_h (coarse to fine)."""
        b, d = self.base_channels, self.depth
        return [b << d] + [b << (d - k) for k in range(1, d + 1)]

    def tap_sizes(self) -> list:
        """Spatial size (h, w) of taps f_0..f_h."""
        d = self.depth
        return [(self.input_h >> (d - k), self.input_w >> (d - k)) for k in range(d + 1)]


class Conv2d:
    def __init__(self, cin: int, cout: int, kernel: int, padding: int = 0):
        self.w = Tensor(np.zeros((cout, cin, kernel, kernel)), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=1, padding=self.padding)

    def named_parameters(self, prefix: str):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


class BatchNorm2d:
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState.fresh(channels)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ad.batchnorm2d(x, self.gamma, self.beta, self.state, mode)

    def named_parameters(self, prefix: str):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]


class DoubleConv:
    """Two 3x3 same-padding conv + BN + ReLU blocks."""

    def __init__(self, cin: int, cout: int):
        self.conv1 = Conv2d(cin, cout, 3, padding=1)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, padding=1)
        self.bn2 = BatchNorm2d(cout)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = ad.relu(self.bn1(self.conv1(x), mode))
        return ad.relu(self.bn2(self.conv2(h), mode))

    def named_parameters(self, prefix: str):
        out = self.conv1.named_parameters(prefix + ".conv1")
        out += self.bn1.named_parameters(prefix + ".bn1")
        out += self.conv2.named_parameters(prefix + ".conv2")
        out += self.bn2.named_parameters(prefix + ".bn2")
        return out

    def bn_states(self, prefix: str):
        return [(prefix + ".bn1", self.bn1.state), (prefix + ".bn2", self.bn2.state)]


class OutputHead:
    """1x1 conv -> BN -> ReLU -> 1x1 conv to class logits, no resampling."""

    def __init__(self, cin: int, num_classes: int):
        self.conv1 = Conv2d(cin, cin, 1)
        self.bn = BatchNorm2d(cin)
        self.conv2 = Conv2d(cin, num_classes, 1)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return self.conv2(ad.relu(self.bn(self.conv1(x), mode)))

    def named_parameters(self, prefix: str):
        out = self.conv1.named_parameters(prefix + ".conv1")
        out += self.bn.named_parameters(prefix + ".bn")
        out += self.conv2.named_parameters(prefix + ".conv2")
        return out

    def bn_states(self, prefix: str):
        return [(prefix + ".bn", self.bn.state)]


class UNet:
    def __init__(self, config: ModelConfig):
        b, d = config.base_channels, config.depth
        self.depth = d
        self.enc = []
        cin = config.in_channels
        for i in range(d):
            self.enc.append(DoubleConv(cin, b << i))
            cin = b << i
        self.bottleneck = DoubleConv(cin, b << d)
        self.dec = []
        for k in range(1, d + 1):
            up_c = b << (d - k + 1)
            skip_c = b << (d - k)
            self.dec.append(DoubleConv(up_c + skip_c, skip_c))

    def features(self, x: Tensor, mode: str) -> list:
        """Taps f_0..f_h, coarse to fine; f_h is full resolution."""
        skips = []
        h = x
        for enc in self.enc:
            f = enc(h, mode)
            skips.append(f)
            h = ad.maxpool2d(f, 2, 2)
        h = self.bottleneck(h, mode)
        taps = [h]
        for k, dec in enumerate(self.dec, start=1):
            sk = skips[self.depth - k]
            h = ad.bilinear_upsample(h, sk.shape[2], sk.shape[3])
            h = dec(ad.concat_channels([h, sk]), mode)
            taps.append(h)
        return taps

    def named_parameters(self):
        out = []
        for i, enc in enumerate(self.enc):
            out += enc.named_parameters(f"enc{i}")
        out += self.bottleneck.named_parameters("bottleneck")
        for k, dec in enumerate(self.dec, start=1):
            out += dec.named_parameters(f"dec{k}")
        return out

    def bn_states(self):
        out = []
        for i, enc in enumerate(self.enc):
            out += enc.bn_states(f"enc{i}")
        out += self.bottleneck.bn_states("bottleneck")
        for k, dec in enumerate(self.dec, start=1):
            out += dec.bn_states(f"dec{k}")
        return out


class SegModel:
    """UNet plus the output heads requested via head roles."""

    def __init__(self, config: ModelConfig, head_roles):
        config.validate()
        roles = frozenset(head_roles)
        bad = roles - set(HEAD_ROLES)
        if bad:
            raise ConfigError(f"unknown head roles: {sorted(bad)}")
        self.config = config
        self.head_roles = roles
        self.unet = UNet(config)
        chans = config.tap_channels()
        self.head_std = OutputHead(chans[-1], config.num_classes)
        self.heads_pyramid = None
        if "pyramid" in roles:
            self.heads_pyramid = [OutputHead(c, config.num_classes) for c in chans]
        self.heads_mil = None
        if "mil" in roles or "mil_deep" in roles:
            taps = range(len(chans)) if "mil_deep" in roles else [len(chans) - 1]
            self.heads_mil = {k: OutputHead(chans[k], config.num_classes) for k in taps}

    def features(self, x: Tensor, mode: str) -> list:
        return self.unet.features(x, mode)

    def logits_std(self, taps, mode: str) -> Tensor:
        return self.head_std(taps[-1], mode)

    def logits_pyramid(self, taps, mode: str) -> list:
        if self.heads_pyramid is None:
            raise ConfigError("model was built without pyramid heads")
        return [head(tap, mode) for head, tap in zip(self.heads_pyramid, taps)]

    def logits_mil(self, taps, mode: str) -> dict:
        """Image-level logits per MIL tap: pooled feature through the head."""
        if self.heads_mil is None:
            raise ConfigError("model was built without MIL heads")
        return {k: head(ad.avgpool_spatial(taps[k]), mode)
                for k, head in sorted(self.heads_mil.items())}

    def named_parameters(self):
        out = self.unet.named_parameters()
        out += self.head_std.named_parameters("head_std")
        if self.heads_pyramid is not None:
            for k, head in enumerate(self.heads_pyramid):
                out += head.named_parameters(f"head_pyr{k}")
        if self.heads_mil is not None:
            for k, head in sorted(self.heads_mil.items()):
                out += head.named_parameters(f"head_mil{k}")
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def bn_states(self):
        out = self.unet.bn_states()
        out += self.head_std.bn_states("head_std")
        if self.heads_pyramid is not None:
            for k, head in enumerate(self.heads_pyramid):
                out += head.bn_states(f"head_pyr{k}")
        if self.heads_mil is not None:
            for k, head in sorted(self.heads_mil.items()):
                out += head.bn_states(f"head_mil{k}")
        return out

    def predict_std(self, images: np.ndarray) -> np.ndarray:
        """Standard-head logits in eval mode, no graph, no state mutation."""
        with ad.no_grad():
            taps = self.features(Tensor(images), "eval")
            return self.logits_std(taps, "eval").data


def build_model(config: ModelConfig, head_roles) -> SegModel:
    return SegModel(config, head_roles)


def init_xavier(model: SegModel, seed: int):
    """Xavier-uniform conv kernels, zero biases, identity BN; deterministic."""
    rng = np.random.default_rng(seed)
    for name, t in model.named_parameters():
        if name.endswith(".w"):
            cout, cin, kh, kw = t.data.shape
            fan_in = cin * kh * kw
            fan_out = cout * kh * kw
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            t.data[...] = rng.uniform(-bound, bound, t.data.shape)
        elif name.endswith(".gamma"):
            t.data[...] = 1.0
        else:  # conv biases and BN beta
            t.data[...] = 0.0
    for _, st in model.bn_states():
        st.running_mean[...] = 0.0
        st.running_var[...] = 1.0


def new_model(config: ModelConfig, head_roles, seed: int) -> SegModel:
    m = build_model(config, head_roles)
    init_xavier(m, seed)
    return m


def param_count(model: SegModel) -> int:
    """Trainable parameter elements (BN running stats not included)."""
    return int(sum(t.data.size for t in model.parameters()))


def snapshot_params(model: SegModel) -> np.ndarray:
    """Flatten all parameters plus BN running stats into one float64 vector."""
    parts = [t.data.reshape(-1) for t in model.parameters()]
    for _, st in model.bn_states():
        parts.append(st.running_mean)
        parts.append(st.running_var)
    return np.concatenate(parts)


def load_params(model: SegModel, vec: np.ndarray):
    """Inverse of snapshot_params; length must match exactly."""
    vec = np.asarray(vec, dtype=np.float64)
    expect = param_count(model) + sum(2 * st.running_mean.size for _, st in model.bn_states())
    if vec.size != expect:
        raise ConfigError(f"parameter vector has {vec.size} entries, model needs {expect}")
    pos = 0
    for t in model.parameters():
        n = t.data.size
        t.data[...] = vec[pos : pos + n].reshape(t.data.shape)
        pos += n
    for _, st in model.bn_states():
        n = st.running_mean.size
        st.running_mean[...] = vec[pos : pos + n]
        pos += n
        st.running_var[...] = vec[pos : pos + n]
        pos += n


def save_checkpoint(path, model: SegModel, meta: dict | None = None):
    """FSEG container: magic, version, JSON header, little-endian f8 params."""
    header = {
        "config": asdict(model.config),
        "head_roles": sorted(model.head_roles),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    vec = snapshot_params(model)
    with open(path, "wb") as f:
        f.write(_FSEG_MAGIC)
        f.write(struct.pack("<H", _FSEG_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<Q", vec.size))
        f.write(vec.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read an FSEG checkpoint; returns (model, meta)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 6 or raw[:4] != _FSEG_MAGIC:
        raise FormatError(f"{path}: not an FSEG checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _FSEG_VERSION:
        raise FormatError(f"{path}: unsupported FSEG version {version}")
    try:
        (blob_len,) = struct.unpack_from("<I", raw, 6)
        header = json.loads(raw[10 : 10 + blob_len].decode("utf-8"))
        off = 10 + blob_len
        (n,) = struct.unpack_from("<Q", raw, off)
        off += 8
        payload = raw[off : off + 8 * n]
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt FSEG checkpoint: {exc}") from exc
    if len(payload) != 8 * n:
        raise FormatError(f"{path}: truncated parameter payload")
    vec = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    config = ModelConfig(**header["config"])
    model = build_model(config, header["head_roles"])
    load_params(model, vec)
    return model, header.get("meta", {})
