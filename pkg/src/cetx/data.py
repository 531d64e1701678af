"""Windowed sensor datasets: containers, synthetic generation, group
splits, channel mean normalization, and file formats.

A dataset is N windows of shape (C, L) with integer class labels and
group (user) identifiers. Splits partition groups, never windows, so no
group straddles train and test. The binary windows format carries shape
and integrity metadata; a plain CSV importer accepts one window per row.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "DatasetMeta",
    "WindowedDataset",
    "SplitSpec",
    "group_split",
    "generate_synthetic",
    "channel_means",
    "apply_channel_means",
    "channel_normalize",
    "save_windows_file",
    "load_windows_file",
    "load_csv",
    "DataFileError",
]

WINDOWS_MAGIC = b"CETD"
WINDOWS_VERSION = 1


class DataFileError(Exception):
    pass


@dataclass(frozen=True)
class DatasetMeta:
    num_classes: int
    channels: int
    window_length: int
    class_names: tuple[str, ...] | None = None
    sample_rate: float | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.window_length < 1:
            raise ValueError(f"window_length must be >= 1, got {self.window_length}")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ValueError(
                f"got {len(self.class_names)} class names for {self.num_classes} classes"
            )


@dataclass
class WindowedDataset:
    windows: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    meta: DatasetMeta

    def __post_init__(self):
        self.windows = np.ascontiguousarray(self.windows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        if self.windows.ndim != 3:
            raise ValueError(f"windows must be (N, C, L), got shape {self.windows.shape}")
        n, c, length = self.windows.shape
        if n < 1:
            raise ValueError("dataset must contain at least one window")
        if c != self.meta.channels or length != self.meta.window_length:
            raise ValueError(
                f"windows are ({c}, {length}), metadata says ({self.meta.channels}, {self.meta.window_length})"
            )
        if self.labels.shape != (n,) or self.groups.shape != (n,):
            raise ValueError("labels and groups must be 1-D with one entry per window")
        if self.labels.min() < 0 or self.labels.max() >= self.meta.num_classes:
            raise ValueError(
                f"labels must be in [0, {self.meta.num_classes}), got range "
                f"[{int(self.labels.min())}, {int(self.labels.max())}]"
            )

    def __len__(self) -> int:
        return self.windows.shape[0]

    def subset(self, mask: np.ndarray) -> "WindowedDataset":
        return WindowedDataset(self.windows[mask], self.labels[mask], self.groups[mask], self.meta)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def group_split(dataset: WindowedDataset, spec: SplitSpec) -> tuple[WindowedDataset, WindowedDataset]:
    """Partition by group: round(fraction * G) groups train, the rest test,
    at least one group on each side. Deterministic in spec.seed."""
    unique = np.unique(dataset.groups)
    if unique.size < 2:
        raise ValueError("group split needs at least 2 distinct groups")
    n_train = int(np.floor(spec.train_fraction * unique.size + 0.5))
    n_train = min(max(n_train, 1), unique.size - 1)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    shuffled = rng.permutation(unique)
    train_groups = set(shuffled[:n_train].tolist())
    mask = np.array([g in train_groups for g in dataset.groups.tolist()])
    return dataset.subset(mask), dataset.subset(~mask)


def generate_synthetic(
    num_classes: int = 6,
    channels: int = 3,
    length: int = 400,
    per_class: int = 100,
    groups: int = 10,
    seed: int = 0,
    noise_std: float = 0.1,
) -> WindowedDataset:
    """Deterministic, exactly class-balanced sinusoid windows.

    Each (class, channel) pair owns a distinct integer frequency and a
    fixed phase; groups modulate amplitude, phase, and baseline, standing
    in for users. When noise_std > 0 each window also draws an amplitude
    dip from Uniform(1 - 3 noise_std, 1), floored at 0.1, so noisier
    datasets contain windows whose tone sits near the noise floor. With
    noise_std = 0 all windows of one class within one group are
    identical; the class is always recoverable from the dominant
    frequency of any channel.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if channels < 1 or length < 8 or per_class < 1 or groups < 1:
        raise ValueError("channels >= 1, length >= 8, per_class >= 1, groups >= 1 required")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    # spread frequencies over most of the band: narrow kernels can only
    # tell classes apart when their frequencies differ as a fraction of
    # the sampling rate, not by +-1 cycle per window
    nyquist = length // 2
    count = num_classes * channels
    freqs = np.unique(np.rint(np.linspace(0.1, 0.9, count) * nyquist).astype(np.int64))
    if freqs.shape[0] < count or freqs[0] < 1:
        raise ValueError(
            f"length {length} too short to give {num_classes}x{channels} distinct frequencies"
        )

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    # channel-major layout: within one channel, classes occupy adjacent
    # bands, so class margins are one band step rather than `channels` steps
    freqs = freqs.reshape(channels, num_classes).T.astype(np.float64)
    spacing = (freqs.max() - freqs.min()) / max(count - 1, 1)
    class_phase = rng.uniform(0.0, 2.0 * np.pi, (num_classes, channels))
    group_amp = rng.uniform(0.8, 1.2, groups)
    group_phase = rng.uniform(0.0, 2.0 * np.pi, (groups, channels))
    group_base = rng.normal(0.0, 0.1, (groups, channels))
    # each group detunes every template by just under half the per-channel
    # class spacing: the nearest template still identifies the class, but
    # held-out groups sit at frequencies never seen in training
    group_freq = rng.uniform(-0.45, 0.45, (groups, channels)) * spacing
    amp_low = max(1.0 - 3.0 * noise_std, 0.1)

    t = np.arange(length) / length
    n = num_classes * per_class
    windows = np.empty((n, channels, length), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    group_ids = np.empty(n, dtype=np.int64)
    i = 0
    for k in range(num_classes):
        for j in range(per_class):
            g = j % groups
            # the dip draw is part of the noise model, so noise_std = 0
            # must skip it to keep within-(class, group) windows identical
            dip = rng.uniform(amp_low, 1.0) if noise_std > 0 else 1.0
            for c in range(channels):
                phase = class_phase[k, c] + group_phase[g, c]
                f = freqs[k, c] + group_freq[g, c]
                clean = dip * group_amp[g] * np.sin(2.0 * np.pi * f * t + phase) + group_base[g, c]
                if noise_std > 0:
                    clean = clean + rng.normal(0.0, noise_std, length)
                windows[i, c] = clean
            labels[i] = k
            group_ids[i] = g
            i += 1
    meta = DatasetMeta(num_classes=num_classes, channels=channels, window_length=length)
    return WindowedDataset(windows, labels, group_ids, meta)


def channel_means(dataset: WindowedDataset) -> np.ndarray:
    """Per-channel mean over all windows and time steps, shape (C,)."""
    return dataset.windows.mean(axis=(0, 2), dtype=np.float64)


def apply_channel_means(dataset: WindowedDataset, means: np.ndarray) -> WindowedDataset:
    means = np.asarray(means, dtype=np.float64).reshape(-1)
    if means.shape != (dataset.meta.channels,):
        raise ValueError(
            f"means must have shape ({dataset.meta.channels},), got {means.shape}"
        )
    shifted = (dataset.windows - means[None, :, None].astype(np.float32)).astype(np.float32)
    return WindowedDataset(shifted, dataset.labels, dataset.groups, dataset.meta)


def channel_normalize(
    train: WindowedDataset, *others: WindowedDataset
) -> tuple[tuple[WindowedDataset, ...], np.ndarray]:
    """Mean-normalize channels using statistics from `train` only; the
    same means are applied to every other split. Returns the normalized
    datasets (train first) and the means used."""
    means = channel_means(train)
    normalized = tuple(apply_channel_means(d, means) for d in (train, *others))
    return normalized, means


# -- file formats ------------------------------------------------------------


def save_windows_file(dataset: WindowedDataset, path) -> None:
    """Binary layout: magic, u32 version, u32 N/C/L/num_classes/num_groups,
    float32 windows, u16 labels, u16 groups, trailing CRC-32 of everything
    after the magic."""
    n, c, length = dataset.windows.shape
    if dataset.meta.num_classes > 0xFFFF:
        raise ValueError("windows file stores labels as u16; too many classes")
    if dataset.groups.min() < 0 or dataset.groups.max() > 0xFFFF:
        raise ValueError("windows file stores groups as u16; group ids must be in [0, 65535]")
    num_groups = int(np.unique(dataset.groups).size)
    parts = [
        struct.pack("<6I", WINDOWS_VERSION, n, c, length, dataset.meta.num_classes, num_groups),
        np.ascontiguousarray(dataset.windows, dtype="<f4").tobytes(),
        np.ascontiguousarray(dataset.labels, dtype="<u2").tobytes(),
        np.ascontiguousarray(dataset.groups, dtype="<u2").tobytes(),
    ]
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(WINDOWS_MAGIC)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_windows_file(path) -> WindowedDataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != WINDOWS_MAGIC:
        raise DataFileError(f"not a windows file (bad magic): {path}")
    payload, (stored_crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise DataFileError(f"windows file checksum mismatch: {path}")
    if len(payload) < 24:
        raise DataFileError(f"truncated windows file header: {path}")
    version, n, c, length, num_classes, num_groups = struct.unpack("<6I", payload[:24])
    if version != WINDOWS_VERSION:
        raise DataFileError(f"unsupported windows file version {version}, expected {WINDOWS_VERSION}")
    expected = 24 + 4 * n * c * length + 2 * n + 2 * n
    if len(payload) != expected:
        raise DataFileError(
            f"windows file has {len(payload)} payload bytes, expected {expected} for N={n} C={c} L={length}"
        )
    pos = 24
    windows = np.frombuffer(payload, dtype="<f4", count=n * c * length, offset=pos).reshape(n, c, length)
    pos += 4 * n * c * length
    labels = np.frombuffer(payload, dtype="<u2", count=n, offset=pos).astype(np.int64)
    pos += 2 * n
    group_ids = np.frombuffer(payload, dtype="<u2", count=n, offset=pos).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DataFileError(
            f"windows file labels reach {int(labels.max())} but num_classes is {num_classes}"
        )
    if int(np.unique(group_ids).size) != num_groups:
        raise DataFileError(
            f"windows file declares {num_groups} groups but contains {int(np.unique(group_ids).size)}"
        )
    meta = DatasetMeta(num_classes=num_classes, channels=c, window_length=length)
    return WindowedDataset(windows.copy(), labels, group_ids, meta)


def load_csv(path, meta: DatasetMeta) -> WindowedDataset:
    """One window per line: group id, label, then C*L samples in
    channel-major order. No header. Errors name the offending line."""
    expected = 2 + meta.channels * meta.window_length
    windows, labels, group_ids = [], [], []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != expected:
                raise DataFileError(
                    f"{path}: line {lineno} has {len(fields)} fields, expected {expected} "
                    f"(group, label, {meta.channels}x{meta.window_length} values)"
                )
            try:
                group = int(fields[0])
                label = int(fields[1])
                values = np.array(fields[2:], dtype=np.float32)
            except ValueError as exc:
                raise DataFileError(f"{path}: line {lineno}: non-numeric field ({exc})") from exc
            windows.append(values.reshape(meta.channels, meta.window_length))
            labels.append(label)
            group_ids.append(group)
    if not windows:
        raise DataFileError(f"{path}: no data rows")
    return WindowedDataset(np.stack(windows), np.array(labels), np.array(group_ids), meta)
