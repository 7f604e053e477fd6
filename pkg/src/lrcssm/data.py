"""Dataset loading, synthesis, splitting and normalization.

Supported on-disk formats:

  .ts   header directives (@problemName, @classLabel true <names>, @data),
        one case per line, dimensions separated by ':', values by ',',
        class label as the final field.  Lines may end in CRLF; lines
        starting with '#' are comments.  Unknown directives are ignored
        with a warning.

  .csv  flat fallback: header  id,time,ch0,...,ch<p-1>,label  with one row
        per (sequence, timestep).

All sequences in a dataset share one length T and channel count p.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError

STD_FLOOR = 1e-8
SYNTH_KINDS = ("sign_of_sum", "long_parity")


@dataclass
class ChannelStats:
    mean: np.ndarray  # (p,)
    std: np.ndarray   # (p,), floored


@dataclass
class Dataset:
    sequences: np.ndarray       # (N, T, p); T is fixed per dataset
    labels: np.ndarray          # (N,) class indices
    class_names: list
    stats: Optional[ChannelStats] = None  # set after normalization, train-derived

    @property
    def n_samples(self) -> int:
        return self.sequences.shape[0]

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[1]

    @property
    def n_channels(self) -> int:
        return self.sequences.shape[2]

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        if self.sequences.ndim != 3:
            raise ValidationError("sequences must be a (N, T, p) array")
        if self.labels.shape != (self.n_samples,):
            raise ValidationError("labels must align with sequences")
        if self.n_samples and not (
                (0 <= self.labels).all() and (self.labels < self.class_count).all()):
            raise ValidationError("labels out of range")


def load_ts(path) -> Dataset:
    """Parse a .ts classification file."""
    class_names = None
    in_data = False
    rows = []
    labels = []
    n_dims = None
    t_len = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n").strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("@"):
                if in_data:
                    raise ParseError("directive after @data", line=lineno)
                head, _, rest = line.partition(" ")
                head = head.lower()
                if head == "@data":
                    in_data = True
                elif head == "@problemname":
                    pass
                elif head == "@classlabel":
                    toks = rest.split()
                    if not toks or toks[0].lower() not in ("true", "false"):
                        raise ParseError("@classLabel needs true/false", line=lineno)
                    if toks[0].lower() == "false":
                        raise ValidationError(
                            "@classLabel false: file has no labels to classify")
                    class_names = toks[1:]
                    if not class_names:
                        raise ParseError("@classLabel true needs label names",
                                         line=lineno)
                else:
                    warnings.warn(f"{path}: ignoring directive {head!r}")
                continue
            if not in_data:
                raise ParseError("data line before @data", line=lineno)
            parts = line.split(":")
            if len(parts) < 2:
                raise ParseError("expected 'values:label'", line=lineno)
            *dims, label = parts
            if n_dims is None:
                n_dims = len(dims)
            elif len(dims) != n_dims:
                raise ValidationError(
                    f"line {lineno}: {len(dims)} dimensions, expected {n_dims}")
            try:
                chans = [np.array([float(v) for v in d.split(",")]) for d in dims]
            except ValueError as e:
                raise ParseError(str(e), line=lineno) from None
            lens = {len(c) for c in chans}
            if len(lens) != 1:
                raise ValidationError(f"line {lineno}: ragged dimension lengths {lens}")
            if t_len is None:
                t_len = lens.pop()
            elif lens != {t_len}:
                raise ValidationError(
                    f"line {lineno}: length {lens.pop()}, expected {t_len}")
            rows.append(np.stack(chans, axis=1))
            labels.append(label.strip())
    if class_names is None:
        # No header; infer the label set in first-appearance order.
        seen = []
        for lb in labels:
            if lb not in seen:
                seen.append(lb)
        class_names = seen
    index = {name: i for i, name in enumerate(class_names)}
    try:
        y = np.array([index[lb] for lb in labels], dtype=np.int64)
    except KeyError as e:
        raise ValidationError(f"label {e} not declared in @classLabel") from None
    seqs = np.stack(rows) if rows else np.zeros((0, 0, 0))
    ds = Dataset(seqs, y, list(class_names))
    ds.validate()
    return ds


def save_ts(ds: Dataset, path, problem_name="lrcssm") -> None:
    """Write a Dataset as .ts; values use shortest round-trip formatting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"@problemName {problem_name}\n")
        fh.write("@classLabel true " + " ".join(str(c) for c in ds.class_names) + "\n")
        fh.write("@data\n")
        for seq, lab in zip(ds.sequences, ds.labels):
            dims = [",".join(repr(float(v)) for v in seq[:, ch])
                    for ch in range(ds.n_channels)]
            fh.write(":".join(dims) + ":" + str(ds.class_names[lab]) + "\n")


def load_csv(path) -> Dataset:
    """Parse the flat CSV fallback format."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh
                 if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ParseError("empty file", line=1)
    header = lines[0].split(",")
    if header[0] != "id" or header[1] != "time" or header[-1] != "label":
        raise ParseError("expected header id,time,ch...,label", line=1)
    p = len(header) - 3
    by_id = {}
    for lineno, line in enumerate(lines[1:], start=2):
        toks = line.split(",")
        if len(toks) != len(header):
            raise ParseError(f"{len(toks)} fields, expected {len(header)}",
                             line=lineno)
        sid = toks[0]
        by_id.setdefault(sid, []).append(
            (int(toks[1]), [float(v) for v in toks[2:-1]], toks[-1]))
    rows, labels = [], []
    t_len = None
    for sid, entries in by_id.items():
        entries.sort(key=lambda e: e[0])
        arr = np.array([vals for _, vals, _ in entries])
        if t_len is None:
            t_len = len(arr)
        elif len(arr) != t_len:
            raise ValidationError(f"sequence {sid}: length {len(arr)} != {t_len}")
        lbs = {lab for _, _, lab in entries}
        if len(lbs) != 1:
            raise ValidationError(f"sequence {sid}: conflicting labels {lbs}")
        rows.append(arr)
        labels.append(lbs.pop())
    seen = []
    for lb in labels:
        if lb not in seen:
            seen.append(lb)
    y = np.array([seen.index(lb) for lb in labels], dtype=np.int64)
    ds = Dataset(np.stack(rows), y, seen)
    ds.validate()
    return ds


def save_csv(ds: Dataset, path) -> None:
    cols = ",".join(f"ch{i}" for i in range(ds.n_channels))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"id,time,{cols},label\n")
        for sid, (seq, lab) in enumerate(zip(ds.sequences, ds.labels)):
            name = ds.class_names[lab]
            for t in range(ds.seq_len):
                vals = ",".join(repr(float(v)) for v in seq[t])
                fh.write(f"{sid},{t},{vals},{name}\n")


def load_dataset(path) -> Dataset:
    path = str(path)
    if path.endswith(".csv"):
        return load_csv(path)
    return load_ts(path)


def split(ds: Dataset, seed: int, fractions=(0.7, 0.15, 0.15)):
    """Deterministic shuffled split into (train, val, test)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must sum to 1, got {fractions}")
    n = ds.n_samples
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    bounds = (perm[:n_train], perm[n_train:n_train + n_val],
              perm[n_train + n_val:])
    parts = []
    for frac, idx in zip(fractions, bounds):
        if frac > 0 and len(idx) == 0:
            raise ConfigurationError(
                f"fraction {frac} of {n} samples yields an empty partition")
        parts.append(Dataset(ds.sequences[idx], ds.labels[idx],
                             list(ds.class_names)))
    return tuple(parts)


def compute_channel_stats(ds: Dataset) -> ChannelStats:
    """Per-channel mean/std over all sequences and timesteps."""
    flat = ds.sequences.reshape(-1, ds.n_channels)
    return ChannelStats(mean=flat.mean(axis=0),
                        std=np.maximum(flat.std(axis=0), STD_FLOOR))


def normalize(stats: ChannelStats, seq: np.ndarray) -> np.ndarray:
    """Z-score an array of shape (..., p) with the given (train) stats."""
    return (seq - stats.mean) / stats.std


def normalize_dataset(stats: ChannelStats, ds: Dataset) -> Dataset:
    return replace(ds, sequences=normalize(stats, ds.sequences), stats=stats)


def normalize_splits(train: Dataset, *others):
    """Normalize train and any further splits with train-derived stats only."""
    stats = compute_channel_stats(train)
    return tuple(normalize_dataset(stats, d) for d in (train,) + others)


def synth_task(kind: str, t_len: int, p: int, n_samples: int, seed: int,
               signal: float = 0.5) -> Dataset:
    """Generate a desk-scale classification task.

    sign_of_sum: channel 0 carries a per-sequence level shift of +-`signal`
    during the first quarter of the sequence and pure noise afterwards; the
    label is the sign of channel 0 summed over that first quarter.  The signal
    exists only in the early window, so solving the task requires carrying it
    to the end of the sequence.

    long_parity: one or two unit-width spikes on channel 0 separated by at
    least T/2 steps over a low-noise background; the label is the spike count
    modulo 2.
    """
    if kind not in SYNTH_KINDS:
        raise ConfigurationError(f"unknown synthetic task {kind!r}")
    if t_len < 8:
        raise ConfigurationError(f"synthetic tasks need T >= 8, got {t_len}")
    if p < 1:
        raise ConfigurationError("need at least one channel")
    rng = np.random.default_rng(seed)
    if n_samples == 0:
        return Dataset(np.zeros((0, t_len, p)), np.zeros(0, dtype=np.int64),
                       ["0", "1"])
    if kind == "sign_of_sum":
        window = t_len // 4
        x = rng.standard_normal((n_samples, t_len, p))
        shift = np.where(rng.random(n_samples) < 0.5, -signal, signal)
        x[:, :window, 0] += shift[:, None]
        y = (x[:, :window, 0].sum(axis=1) > 0).astype(np.int64)
    else:  # long_parity
        gap = t_len // 2
        x = 0.1 * rng.standard_normal((n_samples, t_len, p))
        counts = rng.integers(1, 3, n_samples)
        y = (counts % 2).astype(np.int64)
        for i, k in enumerate(counts):
            if k == 1:
                pos = rng.integers(0, t_len)
                x[i, pos, 0] += 3.0
            else:
                first = rng.integers(0, t_len - gap)
                second = rng.integers(first + gap, t_len)
                x[i, first, 0] += 3.0
                x[i, second, 0] += 3.0
    return Dataset(x, y, ["0", "1"])
