"""Desk-scale asymmetric encoder-decoder for two-class cell segmentation.

The encoder is a truncated stack of MBConv stages (stem at /2, then stages at
/2, /4, /8, /16, /16). The decoder has four blocks; each concatenates the
encoder feature at its working resolution, runs conv-BN-swish twice and
doubles height and width. A 1x1 convolution plus sigmoid produces the mask.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .numcore import (Tensor, add, batchnorm2d, bilinear_upsample2x, concat_channels, conv2d,
                      depthwise_conv2d, global_avg_pool, mul, sigmoid, swish)

MAGIC = b"ECS1"
TASKS = ("mask", "centers")


@dataclass
class ModelConfig:
    input_size: int = 96
    # stem + five MBConv stages
    encoder_widths: tuple[int, ...] = (16, 16, 24, 32, 48, 64)
    stem_stride: int = 2
    stage_strides: tuple[int, ...] = (1, 2, 2, 2, 1)
    stage_repeats: tuple[int, ...] = (1, 2, 2, 3, 4)
    # EfficientNet convention: the first stage does not expand
    expansions: tuple[int, ...] = (1, 4, 4, 4, 4)
    se_ratio: float = 0.25
    decoder_filters: tuple[int, ...] = (32, 24, 16, 8)
    task: str = "mask"

    def __post_init__(self):
        for name in ("encoder_widths", "stage_strides", "stage_repeats", "expansions", "decoder_filters"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if len(self.encoder_widths) != 6:
            raise ConfigError("encoder_widths needs a stem width plus five stage widths")
        if len(self.stage_strides) != 5 or len(self.stage_repeats) != 5 or len(self.expansions) != 5:
            raise ConfigError("stage_strides, stage_repeats and expansions need five entries")
        if any(r < 1 for r in self.stage_repeats) or any(w < 1 for w in self.encoder_widths):
            raise ConfigError("widths and repeats must be positive")
        total = self.stem_stride * int(np.prod(self.stage_strides))
        if total != 16:
            raise ConfigError(f"encoder must downsample by 16, got {total}")
        if len(self.decoder_filters) != 4:
            raise ConfigError("decoder needs exactly four blocks")
        if any(b >= a for a, b in zip(self.decoder_filters, self.decoder_filters[1:])):
            raise ConfigError(f"decoder filters must strictly decrease, got {self.decoder_filters}")
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if any(e < 1 for e in self.expansions) or not 0 < self.se_ratio <= 1:
            raise ConfigError("invalid MBConv expansion or squeeze ratio")
        if len(self.skip_sources()) != 4:
            raise ConfigError("encoder does not provide a feature at /2, /4, /8 and /16")

    def stage_scales(self) -> list[int]:
        scale = self.stem_stride
        scales = []
        for s in self.stage_strides:
            scale *= s
            scales.append(scale)
        return scales

    def skip_sources(self) -> dict[int, int]:
        """Map decoder working scale -> index of the encoder stage feeding the skip.

        The last stage is the bottleneck; every other scale uses the deepest
        stage at that resolution.
        """
        scales = self.stage_scales()
        sources: dict[int, int] = {}
        for i, sc in enumerate(scales[:-1]):
            sources[sc] = i
        return {sc: sources[sc] for sc in (16, 8, 4, 2) if sc in sources}

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ParamReport:
    total: int
    encoder: int
    decoder: int


@dataclass
class Model:
    config: ModelConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """All named arrays that make up the model, parameters first."""
        out = OrderedDict((k, t.data) for k, t in self.params.items())
        out.update(self.buffers)
        return out

    def copy_state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.state().items())

    def load_state(self, state: dict, strict: bool = True) -> None:
        for name, arr in state.items():
            if name in self.params:
                target = self.params[name].data
            elif name in self.buffers:
                target = self.buffers[name]
            else:
                raise FormatError(f"unexpected tensor {name!r}")
            if target.shape != arr.shape:
                raise FormatError(f"tensor {name!r}: shape {arr.shape} != expected {target.shape}")
        if strict:
            missing = set(self.state()) - set(state)
            if missing:
                raise FormatError(f"missing tensors: {sorted(missing)[:5]}")
        for name, arr in state.items():
            if name in self.params:
                self.params[name].data[...] = arr
            else:
                self.buffers[name][...] = arr

    def astype(self, dtype) -> "Model":
        """Detached copy of the model in another float dtype."""
        params = OrderedDict((k, Tensor(t.data, requires_grad=True, name=k, dtype=dtype))
                             for k, t in self.params.items())
        buffers = OrderedDict((k, v.astype(dtype)) for k, v in self.buffers.items())
        return Model(self.config, params, buffers)


class _Builder:
    def __init__(self, model: Model, rng: np.random.Generator):
        self.model = model
        self.rng = rng

    def conv(self, name: str, cout: int, cin: int, k: int, depthwise: bool = False) -> None:
        fan_in = k * k if depthwise else cin * k * k
        limit = np.sqrt(6.0 / fan_in)
        shape = (cout, 1, k, k) if depthwise else (cout, cin, k, k)
        w = self.rng.uniform(-limit, limit, size=shape)
        self.model.params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.model.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.b")

    def bn(self, name: str, c: int) -> None:
        self.model.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True, name=f"{name}.gamma")
        self.model.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True, name=f"{name}.beta")
        self.model.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
        self.model.buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)


def _se_width(cin: int, ratio: float) -> int:
    return max(1, int(cin * ratio))


def _stage_blocks(cfg: ModelConfig):
    """Yield (name, cin, cout, stride, expansion, stage) for every MBConv block."""
    cin = cfg.encoder_widths[0]
    stages = zip(cfg.encoder_widths[1:], cfg.stage_strides, cfg.stage_repeats, cfg.expansions)
    for s, (cout, stride, reps, expand) in enumerate(stages):
        for r in range(reps):
            yield f"enc.s{s + 1}.b{r}", cin, cout, stride if r == 0 else 1, expand, s
            cin = cout


def _decoder_blocks(cfg: ModelConfig):
    """Yield (name, cin, skip_channels, cout) for the four decoder blocks."""
    sources = cfg.skip_sources()
    cin = cfg.encoder_widths[-1]
    for i, (scale, cout) in enumerate(zip((16, 8, 4, 2), cfg.decoder_filters)):
        skip_c = cfg.encoder_widths[1 + sources[scale]]
        yield f"dec.b{i}", cin, skip_c, cout, scale
        cin = cout


def build_model(config: ModelConfig | None = None, seed: int = 0) -> Model:
    """Deterministically initialised model: He-uniform conv weights, zero biases, unit BN gains."""
    cfg = config or ModelConfig()
    cfg.validate()
    model = Model(cfg)
    b = _Builder(model, np.random.default_rng(seed))
    stem = cfg.encoder_widths[0]
    b.conv("enc.stem.conv", stem, 3, 3)
    b.bn("enc.stem.bn", stem)
    for name, cin, cout, _, expand, _ in _stage_blocks(cfg):
        mid = cin * expand
        se = _se_width(cin, cfg.se_ratio)
        if expand != 1:
            b.conv(f"{name}.expand", mid, cin, 1)
            b.bn(f"{name}.expand_bn", mid)
        b.conv(f"{name}.dw", mid, mid, 3, depthwise=True)
        b.bn(f"{name}.dw_bn", mid)
        b.conv(f"{name}.se_reduce", se, mid, 1)
        b.conv(f"{name}.se_expand", mid, se, 1)
        b.conv(f"{name}.project", cout, mid, 1)
        b.bn(f"{name}.project_bn", cout)
    for name, cin, skip_c, cout, _ in _decoder_blocks(cfg):
        b.conv(f"{name}.conv1", cout, cin + skip_c, 3)
        b.bn(f"{name}.bn1", cout)
        b.conv(f"{name}.conv2", cout, cout, 3)
        b.bn(f"{name}.bn2", cout)
    b.conv("dec.head", 1, cfg.decoder_filters[-1], 1)
    return model


def _conv(m: Model, name: str, x: Tensor, stride: int = 1, depthwise: bool = False) -> Tensor:
    w, bias = m.params[f"{name}.w"], m.params[f"{name}.b"]
    pad = w.shape[-1] // 2
    fn = depthwise_conv2d if depthwise else conv2d
    return fn(x, w, bias, stride=stride, pad=pad)


def _bn(m: Model, name: str, x: Tensor, mode: str) -> Tensor:
    p, buf = m.params, m.buffers
    return batchnorm2d(x, p[f"{name}.gamma"], p[f"{name}.beta"],
                       buf[f"{name}.running_mean"], buf[f"{name}.running_var"], mode=mode)


def _mbconv(m: Model, name: str, x: Tensor, cin: int, cout: int, stride: int, expand: int, mode: str) -> Tensor:
    h = x
    if expand != 1:
        h = swish(_bn(m, f"{name}.expand_bn", _conv(m, f"{name}.expand", x), mode))
    h = swish(_bn(m, f"{name}.dw_bn", _conv(m, f"{name}.dw", h, stride=stride, depthwise=True), mode))
    s = global_avg_pool(h)
    s = swish(_conv(m, f"{name}.se_reduce", s))
    s = sigmoid(_conv(m, f"{name}.se_expand", s))
    h = mul(h, s)
    h = _bn(m, f"{name}.project_bn", _conv(m, f"{name}.project", h), mode)
    if stride == 1 and cin == cout:
        h = add(h, x)
    return h


def encode(model: Model, x: Tensor, mode: str) -> list[Tensor]:
    """Return the output of each encoder stage (index 0..4)."""
    cfg = model.config
    h = swish(_bn(model, "enc.stem.bn", _conv(model, "enc.stem.conv", x, stride=cfg.stem_stride), mode))
    feats: list[Tensor] = []
    current_stage = 0
    for name, cin, cout, stride, expand, stage in _stage_blocks(cfg):
        if stage != current_stage:
            feats.append(h)
            current_stage = stage
        h = _mbconv(model, name, h, cin, cout, stride, expand, mode)
    feats.append(h)
    return feats


def forward(model: Model, batch, mode: str = "infer") -> Tensor:
    """Map a (B, 3, S, S) batch to (B, 1, S, S) probabilities."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=next(iter(model.params.values())).dtype)
    S = cfg.input_size
    if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (S, S):
        raise DimensionError(f"expected input (B, 3, {S}, {S}), got {x.shape}")
    feats = encode(model, x, mode)
    sources = cfg.skip_sources()
    h = feats[-1]
    for name, _, _, _, scale in _decoder_blocks(cfg):
        h = concat_channels(h, feats[sources[scale]])
        h = swish(_bn(model, f"{name}.bn1", _conv(model, f"{name}.conv1", h), mode))
        h = swish(_bn(model, f"{name}.bn2", _conv(model, f"{name}.conv2", h), mode))
        h = bilinear_upsample2x(h)
    return sigmoid(_conv(model, "dec.head", h))


def param_count(model: Model) -> ParamReport:
    enc = sum(t.data.size for k, t in model.params.items() if k.startswith("enc."))
    dec = sum(t.data.size for k, t in model.params.items() if k.startswith("dec."))
    return ParamReport(total=enc + dec, encoder=enc, decoder=dec)


# ----------------------------------------------------------------------------
# ECS1 weight files

def _encode_weights(state: "OrderedDict[str, np.ndarray]") -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def read_weight_file(path) -> "OrderedDict[str, np.ndarray]":
    """Parse an ECS1 file into named float32 arrays."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated weight file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic, not an ECS1 weight file")
    (count,) = struct.unpack("<I", take(4))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor name is not UTF-8") from exc
        if not name.startswith(("enc.", "dec.")):
            raise FormatError(f"{path}: tensor {name!r} lacks an enc./dec. prefix")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if name in out:
            raise FormatError(f"{path}: duplicate tensor {name!r}")
        out[name] = arr
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after last tensor")
    return out


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_path(path) -> Path:
    return Path(f"{path}.json")


def save_weights(model: Model, path, extra: dict | None = None) -> None:
    """Write the model to ``path`` (ECS1) and its config to ``path.json``."""
    _atomic_write(path, _encode_weights(model.state()))
    meta = {"config": model.config.to_dict()}
    if extra:
        meta.update(extra)
    _atomic_write(config_path(path), json.dumps(meta, indent=2, sort_keys=True).encode())


def read_metadata(path) -> dict:
    cp = config_path(path)
    if not cp.exists():
        return {}
    try:
        return json.loads(cp.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{cp}: invalid JSON") from exc


def load_weights(path, config: ModelConfig | None = None, *, encoder_only: bool = False,
                 seed: int = 0) -> Model:
    """Build a model from an ECS1 file.

    The config comes from ``config`` or the ``path.json`` sidecar, falling back
    to defaults. With ``encoder_only`` only ``enc.*`` tensors are taken from
    the file and the decoder keeps its fresh initialisation from ``seed``.
    """
    state = read_weight_file(path)
    if config is None:
        meta = read_metadata(path)
        config = ModelConfig.from_dict(meta["config"]) if "config" in meta else ModelConfig()
    model = build_model(config, seed=seed)
    if encoder_only:
        state = OrderedDict((k, v) for k, v in state.items() if k.startswith("enc."))
        expected = {k for k in model.state() if k.startswith("enc.")}
        missing = expected - set(state)
        if missing:
            raise FormatError(f"{path}: missing encoder tensors: {sorted(missing)[:5]}")
        model.load_state(state, strict=False)
    else:
        model.load_state(state, strict=True)
    return model
