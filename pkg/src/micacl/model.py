"""Model assembly: encoder -> GEIIM -> WIAN -> attention -> pooling -> classifier.

Also holds the run configuration (flat ``key=value`` files) and the ``.mick``
checkpoint format::

    b"MICK" | u32 version=1 | u32 text_len | text (utf-8 key=value lines)
    | u32 num_arrays
    then per array: u32 name_len | name | u32 ndim | ndim * u32 dims | float32 data

All integers little-endian.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .geiim import GeiimParams, geiim_forward
from .mccl import ScaleSet
from .optim import OptimState
from .rng import Xoshiro256
from .tensor import Tensor, as_tensor, matmul, relu
from .wian import WianParams, aggregate, instance_weights, mhsa, wian_forward


@dataclass
class ModelConfig:
    c_in: int = 12
    enc_hidden: int = 16
    c: int = 16
    d: int = 8
    c_h: int = 16
    e: int = 8
    n_heads: int = 4
    k: int = 7
    t: int = 16
    scales: Optional[tuple] = None  # None -> (1, c_h // 2, c_h)
    tau0: float = 0.1
    log_form: bool = False
    # ablation switches
    bypass_geiim: bool = False
    uniform_weights: bool = False
    bypass_dwg: bool = False

    def scale_list(self) -> tuple:
        if self.scales is None:
            return tuple(sorted({1, max(1, self.c_h // 2), self.c_h}))
        return tuple(int(s) for s in self.scales)

    def validate(self) -> None:
        for name in ("c_in", "enc_hidden", "c", "d", "c_h", "e", "n_heads", "k", "t"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k < 2:
            raise ConfigError(f"need at least 2 classes, got k={self.k}")
        if self.c_h % self.n_heads:
            raise ConfigError(f"c_h={self.c_h} is not divisible by n_heads={self.n_heads}")
        scales = self.scale_list()
        if not scales or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigError(f"scales must be non-empty and strictly increasing, got {scales}")
        if scales[0] < 1 or scales[-1] > self.c_h:
            raise ConfigError(f"scales {scales} must lie in [1, c_h={self.c_h}]")
        if not self.tau0 > 0:
            raise ConfigError(f"tau0 must be positive, got {self.tau0}")


LOSS_MODES = ("full", "cet-only", "mccl-only")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    loss_mode: str = "full"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimState = field(default_factory=OptimState)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if not 0 < self.optim.lr_min <= self.optim.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.optim.lr_min}, {self.optim.lr_max}")

    def _owners(self):
        owners = {}
        for f in dataclasses.fields(ModelConfig):
            owners[f.name] = (self.model, f)
        for name in OptimState.HYPERPARAMS:
            owners[name] = (self.optim, next(f for f in dataclasses.fields(OptimState) if f.name == name))
        for f in dataclasses.fields(TrainConfig):
            owners[f.name] = (self.train, f)
        return owners

    def set(self, key: str, value: str) -> None:
        owners = self._owners()
        if key not in owners:
            raise ConfigError(f"unknown config key {key!r}")
        target, f = owners[key]
        setattr(target, key, _parse_value(key, value, getattr(target, key)))

    def to_text(self) -> str:
        lines = []
        for key, (target, _) in self._owners().items():
            value = self.model.scale_list() if key == "scales" else getattr(target, key)
            lines.append(f"{key}={_format_value(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _parse_value(key: str, value: str, current):
    try:
        if key == "scales":
            return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
        if isinstance(current, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return low in ("true", "1")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    enc_w1: Tensor  # [H, C_in]
    enc_b1: Tensor
    enc_w2: Tensor  # [C, H]
    enc_b2: Tensor
    geiim: GeiimParams
    wian: WianParams
    cls_w: Tensor  # [K, C_h]
    cls_b: Tensor
    scale_set: ScaleSet

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        config.validate()
        rng = Xoshiro256(seed)

        def linear(out_dim, in_dim):
            bound = 1.0 / math.sqrt(in_dim)
            return (Tensor(rng.uniform_array((out_dim, in_dim), -bound, bound), requires_grad=True),
                    Tensor(np.zeros(out_dim), requires_grad=True))

        enc_w1, enc_b1 = linear(config.enc_hidden, config.c_in)
        enc_w2, enc_b2 = linear(config.c, config.enc_hidden)
        geiim = GeiimParams.init(config.t, config.d, rng)
        wian = WianParams.init(config.c, config.c_h, config.n_heads, rng)
        cls_w, cls_b = linear(config.k, config.c_h)
        scale_set = ScaleSet.init(config.scale_list(), config.c_h, config.e, rng)
        return cls(enc_w1, enc_b1, enc_w2, enc_b2, geiim, wian, cls_w, cls_b, scale_set)

    def named_parameters(self) -> list:
        out = [("enc.w1", self.enc_w1), ("enc.b1", self.enc_b1),
               ("enc.w2", self.enc_w2), ("enc.b2", self.enc_b2)]
        out += self.geiim.named_parameters()
        out += self.wian.named_parameters()
        out += [("cls.w", self.cls_w), ("cls.b", self.cls_b)]
        out += self.scale_set.named_parameters()
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]


def encode(bags: Tensor, params: ModelParams) -> Tensor:
    hidden = relu(matmul(bags, params.enc_w1.T) + params.enc_b1)
    return matmul(hidden, params.enc_w2.T) + params.enc_b2


def forward_model(bags, params: ModelParams, config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Return ``(logits [B, K], bag embedding [B, C_h])`` for ``bags [B, T, C_in]``."""
    bags = as_tensor(bags)
    if bags.ndim != 3 or bags.shape[1:] != (config.t, config.c_in):
        raise ShapeError(f"bags of shape {bags.shape} do not match [B, {config.t}, {config.c_in}]")
    x = encode(bags, params)
    h = x if config.bypass_geiim else geiim_forward(x, params.geiim)[0]
    if config.uniform_weights:
        w = Tensor(np.full(h.shape, 1.0 / h.shape[-1]))
    else:
        w = instance_weights(h)
    seq = wian_forward(h, w, params.wian, gate=not config.bypass_dwg)
    x_bag = aggregate(mhsa(seq, params.wian))
    logits = matmul(x_bag, params.cls_w.T) + params.cls_b
    return logits, x_bag


# ---------------------------------------------------------------------------
# checkpoint


CK_MAGIC = b"MICK"
CK_VERSION = 1


def write_checkpoint(path, params: ModelParams, config: RunConfig, meta: Optional[dict] = None) -> None:
    text = config.to_text()
    for key, value in (meta or {}).items():
        text += f"@{key}={value}\n"
    blob = text.encode("utf-8")
    named = params.named_parameters()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CK_MAGIC, CK_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(named)))
        for name, p in named:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[RunConfig, dict, dict]:
    """Return ``(config, arrays by name, meta)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = take(4, "magic")
    if magic != CK_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CK_MAGIC!r}", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (text_len,) = struct.unpack("<I", take(4, "config length"))
    text = take(text_len, "config text").decode("utf-8")
    meta = {}
    plain = []
    for line in text.splitlines():
        if line.startswith("@"):
            key, value = line[1:].split("=", 1)
            meta[key] = value
        else:
            plain.append(line)
    config = RunConfig.from_text("\n".join(plain))
    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "array name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4")
        arrays[name] = data.astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return config, arrays, meta


def load_params(config: ModelConfig, arrays: dict) -> ModelParams:
    params = ModelParams.init(config, seed=0)
    named = params.named_parameters()
    expected = {name for name, _ in named}
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))
        extra = sorted(set(arrays) - expected)
        raise ConfigError(f"checkpoint arrays do not match the model: missing {missing}, unexpected {extra}")
    for name, p in named:
        if arrays[name].shape != p.shape:
            raise ShapeError(f"checkpoint array {name} has shape {arrays[name].shape}, model expects {p.shape}")
        p.data[...] = arrays[name]
    return params
