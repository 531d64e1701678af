"""Multi-exit 1-D convolutional classifier.

The network is a stack of conv blocks (conv, layer norm, PReLU, max pool,
optional dropout) with one classification head after every block, so an
E-block network produces E logit vectors per input. The default
configuration uses five blocks with 8/16/24/32/64 filters, kernel 4,
pool 4, dropout 0.1 in blocks 2 and 4, and heads with 32 hidden units.

Forward passes are exposed as a generator over exits: consuming the first
e items runs exactly blocks 1..e plus head e, which is what both
train-time all-exit evaluation and entropy-gated early exit need. The
trunk is never recomputed between exits.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, Tensor
from . import ops

__all__ = [
    "BlockSpec",
    "ExitHeadSpec",
    "ModelConfig",
    "MultiExitNet",
    "build_network",
    "default_model_config",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

CHECKPOINT_MAGIC = b"CETM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    filters: int
    kernel: int = 4
    pool: int = 4
    dropout_rate: float = 0.0


@dataclass(frozen=True)
class ExitHeadSpec:
    hidden_units: int = 32
    num_classes: int = 2


@dataclass(frozen=True)
class ModelConfig:
    channels_in: int
    length_in: int
    num_classes: int
    blocks: tuple[BlockSpec, ...]
    head: ExitHeadSpec
    l2_rate: float = 1e-4
    seed: int = 0


def default_blocks(dropout: float = 0.1) -> tuple[BlockSpec, ...]:
    """Five blocks of 8/16/24/32/64 filters, kernel 4, pool 4, with
    dropout in blocks 2 and 4."""
    rates = {2: dropout, 4: dropout}
    return tuple(
        BlockSpec(filters=f, kernel=4, pool=4, dropout_rate=rates.get(i, 0.0))
        for i, f in enumerate((8, 16, 24, 32, 64), start=1)
    )


def default_model_config(
    channels_in: int,
    length_in: int,
    num_classes: int,
    l2_rate: float = 1e-4,
    seed: int = 0,
    hidden_units: int = 32,
    dropout: float = 0.1,
) -> ModelConfig:
    return ModelConfig(
        channels_in=channels_in,
        length_in=length_in,
        num_classes=num_classes,
        blocks=default_blocks(dropout),
        head=ExitHeadSpec(hidden_units=hidden_units, num_classes=num_classes),
        l2_rate=l2_rate,
        seed=seed,
    )


def _validate_config(config: ModelConfig) -> None:
    if config.num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {config.num_classes}")
    if config.channels_in < 1:
        raise ValueError(f"channels_in must be >= 1, got {config.channels_in}")
    if not config.blocks:
        raise ValueError("at least one block is required")
    for i, b in enumerate(config.blocks, start=1):
        if b.filters < 1:
            raise ValueError(f"block {i}: filters must be >= 1, got {b.filters}")
        if b.kernel < 1:
            raise ValueError(f"block {i}: kernel must be >= 1, got {b.kernel}")
        if b.pool < 1:
            raise ValueError(f"block {i}: pool must be >= 1, got {b.pool}")
        if not 0.0 <= b.dropout_rate < 1.0:
            raise ValueError(f"block {i}: dropout_rate must be in [0, 1), got {b.dropout_rate}")
    max_kernel = max(b.kernel for b in config.blocks)
    if config.length_in < max_kernel:
        raise ValueError(
            f"length_in must be at least the largest kernel ({max_kernel}), got {config.length_in}"
        )
    if config.head.hidden_units < 1:
        raise ValueError(f"head hidden_units must be >= 1, got {config.head.hidden_units}")
    if config.head.num_classes != config.num_classes:
        raise ValueError(
            f"head num_classes {config.head.num_classes} differs from model num_classes {config.num_classes}"
        )
    if config.l2_rate < 0:
        raise ValueError(f"l2_rate must be >= 0, got {config.l2_rate}")


class MultiExitNet:
    """The network plus a flat, ordered parameter registry.

    Initialization is deterministic in config.seed: weights draw from a
    fan-in scaled uniform (bound 1/sqrt(fan_in)) in registry order, biases
    and norm shifts start at zero, norm gains at one, PReLU slopes at 0.25.
    The input instance norm carries no parameters.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        _validate_config(config)
        self.config = config
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        self.params: dict[str, Parameter] = {}
        self._lengths = self._length_chain()
        self._init_params()

    # -- construction -------------------------------------------------------

    def _length_chain(self) -> list[int]:
        """Feature length after each block (conv preserves length)."""
        lengths = []
        length = self.config.length_in
        for b in self.config.blocks:
            length = ops.pooled_length(length, b.pool, b.pool)
            lengths.append(length)
        return lengths

    def _add(self, name: str, data: np.ndarray, decay: bool = False) -> None:
        self.params[name] = Parameter(name, data.astype(self.dtype), weight_decay_eligible=decay)

    def _init_params(self) -> None:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.config.seed)))
        c_in = self.config.channels_in
        for i, b in enumerate(self.config.blocks, start=1):
            bound = 1.0 / np.sqrt(c_in * b.kernel)
            self._add(f"block{i}.conv.weight", rng.uniform(-bound, bound, (b.filters, c_in, b.kernel)), decay=True)
            self._add(f"block{i}.conv.bias", np.zeros(b.filters))
            self._add(f"block{i}.norm.gain", np.ones(b.filters))
            self._add(f"block{i}.norm.shift", np.zeros(b.filters))
            self._add(f"block{i}.act.slopes", np.full(b.filters, 0.25))
            c_in = b.filters
        hidden = self.config.head.hidden_units
        classes = self.config.head.num_classes
        for i, b in enumerate(self.config.blocks, start=1):
            bound = 1.0 / np.sqrt(b.filters)
            self._add(f"exit{i}.hidden.weight", rng.uniform(-bound, bound, (hidden, b.filters)), decay=True)
            self._add(f"exit{i}.hidden.bias", np.zeros(hidden))
            self._add(f"exit{i}.act.slopes", np.full(hidden, 0.25))
            bound = 1.0 / np.sqrt(hidden)
            self._add(f"exit{i}.out.weight", rng.uniform(-bound, bound, (classes, hidden)), decay=True)
            self._add(f"exit{i}.out.bias", np.zeros(classes))

    # -- forward ------------------------------------------------------------

    @property
    def num_exits(self) -> int:
        return len(self.config.blocks)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _check_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim not in (2, 3):
            raise ValueError(f"input must be (C, L) or (N, C, L), got shape {x.shape}")
        c, length = x.shape[-2], x.shape[-1]
        if c != self.config.channels_in:
            raise ValueError(f"input has {c} channels, network expects {self.config.channels_in}")
        if length != self.config.length_in:
            raise ValueError(f"input has length {length}, network expects {self.config.length_in}")
        return x

    def iter_exit_logits(self, x, training: bool = False, rng: np.random.Generator | None = None):
        """Yield exit logits in depth order, running each block lazily.

        Consuming e items computes blocks 1..e and heads 1..e only, which
        makes early-exit inference and full evaluation share one code path
        (and therefore produce identical numbers).
        """
        x = self._check_input(x)
        h = ops.instance_norm(x)
        for i, b in enumerate(self.config.blocks, start=1):
            p = self.params
            h = ops.conv1d(h, p[f"block{i}.conv.weight"].value, p[f"block{i}.conv.bias"].value)
            h = ops.layer_norm(h, p[f"block{i}.norm.gain"].value, p[f"block{i}.norm.shift"].value)
            h = ops.prelu(h, p[f"block{i}.act.slopes"].value, axis=-2)
            h = ops.max_pool1d(h, b.pool, b.pool)
            if training and b.dropout_rate > 0.0:
                h = ops.dropout(h, b.dropout_rate, training=True, rng=rng)
            yield self._exit_head(i, h)

    def _exit_head(self, i: int, features: Tensor) -> Tensor:
        p = self.params
        pooled = ops.global_avg_pool(features)
        hidden = ops.dense(pooled, p[f"exit{i}.hidden.weight"].value, p[f"exit{i}.hidden.bias"].value)
        hidden = ops.prelu(hidden, p[f"exit{i}.act.slopes"].value, axis=-1)
        return ops.dense(hidden, p[f"exit{i}.out.weight"].value, p[f"exit{i}.out.bias"].value)

    def forward_all_exits(self, x, training: bool = False, rng: np.random.Generator | None = None) -> list[Tensor]:
        return list(self.iter_exit_logits(x, training=training, rng=rng))

    def forward_until_exit(self, x, e: int) -> Tensor:
        """Logits of exit e, computing only blocks 1..e (inference mode)."""
        if not 1 <= e <= self.num_exits:
            raise ValueError(f"exit index must be in [1, {self.num_exits}], got {e}")
        gen = self.iter_exit_logits(x, training=False)
        logits = None
        for _ in range(e):
            logits = next(gen)
        gen.close()
        return logits

    # -- bookkeeping --------------------------------------------------------

    def l2_penalty(self) -> Tensor:
        """l2_rate times the sum of squared conv/dense weights. Biases,
        norm affines, and PReLU slopes are excluded."""
        rate = self.config.l2_rate
        if rate == 0.0:
            return Tensor(np.asarray(0.0, dtype=self.dtype))
        total = None
        for p in self.params.values():
            if not p.weight_decay_eligible:
                continue
            sq = (p.value * p.value).sum()
            total = sq if total is None else total + sq
        return total * rate

    def macs_per_exit(self) -> list[int]:
        """Cumulative multiply-accumulates to produce each exit's logits,
        counting conv and dense layers only (norms, activations, and
        pooling are negligible next to them)."""
        macs = []
        trunk = 0
        c_in = self.config.channels_in
        length = self.config.length_in
        hidden = self.config.head.hidden_units
        classes = self.config.head.num_classes
        for b in self.config.blocks:
            trunk += b.filters * c_in * b.kernel * length
            head = hidden * b.filters + classes * hidden
            macs.append(trunk + head)
            length = ops.pooled_length(length, b.pool, b.pool)
            c_in = b.filters
        return macs

    def copy_params_from(self, other: "MultiExitNet") -> None:
        if set(self.params) != set(other.params):
            raise ValueError("parameter registries do not match")
        for name, p in self.params.items():
            src = other.params[name].data
            if src.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {p.shape}")
            p.value.data = src.astype(self.dtype)


def build_network(config: ModelConfig, dtype=np.float32) -> MultiExitNet:
    return MultiExitNet(config, dtype=dtype)


# -- checkpoint serialization -----------------------------------------------


class CheckpointError(Exception):
    pass


def _config_to_dict(config: ModelConfig) -> dict:
    return {
        "channels_in": config.channels_in,
        "length_in": config.length_in,
        "num_classes": config.num_classes,
        "blocks": [
            {"filters": b.filters, "kernel": b.kernel, "pool": b.pool, "dropout_rate": b.dropout_rate}
            for b in config.blocks
        ],
        "head": {"hidden_units": config.head.hidden_units, "num_classes": config.head.num_classes},
        "l2_rate": config.l2_rate,
        "seed": config.seed,
    }


def _config_from_dict(d: dict) -> ModelConfig:
    try:
        return ModelConfig(
            channels_in=int(d["channels_in"]),
            length_in=int(d["length_in"]),
            num_classes=int(d["num_classes"]),
            blocks=tuple(
                BlockSpec(
                    filters=int(b["filters"]),
                    kernel=int(b["kernel"]),
                    pool=int(b["pool"]),
                    dropout_rate=float(b["dropout_rate"]),
                )
                for b in d["blocks"]
            ),
            head=ExitHeadSpec(
                hidden_units=int(d["head"]["hidden_units"]),
                num_classes=int(d["head"]["num_classes"]),
            ),
            l2_rate=float(d["l2_rate"]),
            seed=int(d["seed"]),
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed model config in checkpoint metadata: {exc}") from exc


def save_checkpoint(net: MultiExitNet, path, class_names=None, extra_meta: dict | None = None) -> None:
    """Write magic, version, JSON metadata, per-parameter records, and a
    trailing CRC-32 of everything after the magic bytes.

    `extra_meta` entries (e.g. normalization statistics) merge into the
    metadata without touching the reserved keys."""
    meta = {
        "config": _config_to_dict(net.config),
        "class_names": list(class_names) if class_names is not None else None,
        "seed": net.config.seed,
    }
    if extra_meta:
        overlap = set(extra_meta) & set(meta)
        if overlap:
            raise ValueError(f"extra_meta may not override reserved keys {sorted(overlap)}")
        meta.update(extra_meta)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes]
    for name, p in net.params.items():
        name_bytes = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        parts.append(struct.pack("<II", len(name_bytes), arr.ndim))
        parts.append(name_bytes)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, data: bytes, kind: str):
        self.data = data
        self.pos = 0
        self.kind = kind

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated {self.kind} file: needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def done(self) -> bool:
        return self.pos == len(self.data)


def load_checkpoint(path, dtype=np.float32) -> tuple[MultiExitNet, dict]:
    """Rebuild a network from a checkpoint; returns (net, metadata)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file (bad magic): {path}")
    payload, (stored_crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"checkpoint checksum mismatch: {path}")
    r = _Reader(payload, "checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    meta_len = r.u32()
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from exc
    config = _config_from_dict(meta.get("config", {}))
    net = MultiExitNet(config, dtype=dtype)
    seen = set()
    while not r.done():
        name_len, ndim = r.u32(2)
        name = r.take(name_len).decode("utf-8")
        shape = r.u32(ndim) if ndim != 1 else (r.u32(),)
        if ndim == 0:
            shape = ()
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        if name not in net.params:
            raise CheckpointError(f"checkpoint parameter {name!r} not present in the configured network")
        expect = net.params[name].shape
        if tuple(shape) != tuple(expect):
            raise CheckpointError(f"checkpoint parameter {name!r} has shape {tuple(shape)}, network expects {tuple(expect)}")
        net.params[name].value.data = arr.astype(dtype)
        seen.add(name)
    missing = set(net.params) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
    return net, meta
