"""Toolset ingestion, preprocessing, synthetic data and label corruption.

A toolset CSV comes with a schema sidecar mapping every column to one of
``sensor-numeric``, ``categorical``, ``task-label``, ``sequence-id`` or
``time-index``. Rows sharing a sequence id are the timesteps of one sample.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .container import ContainerError, read_container, write_container
from .numeric import make_rng

KINDS = ("sensor-numeric", "categorical", "task-label", "sequence-id", "time-index")
MISSING = {"", "na", "nan", "null", "none"}
SPLITS = ("train", "val", "test")
# 92 weeks: 70 train, 14 validation, 8 test
WEEK_FRACTIONS = (70 / 92, 14 / 92, 8 / 92)
DATASET_KIND = "softsense-dataset"


class DataError(ValueError):
    pass


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING


# --- raw tables ------------------------------------------------------------


@dataclass
class RawTable:
    columns: list
    kinds: dict
    values: dict  # column -> list; floats (nan = missing) or str (None = missing)

    def __post_init__(self):
        for kind in ("sequence-id", "time-index"):
            n = sum(1 for c in self.columns if self.kinds[c] == kind)
            if n != 1:
                raise DataError(f"table needs exactly one {kind} column, found {n}")

    def __len__(self) -> int:
        return len(self.values[self.columns[0]]) if self.columns else 0

    def of_kind(self, kind: str) -> list:
        return [c for c in self.columns if self.kinds[c] == kind]

    @property
    def seq_col(self) -> str:
        return self.of_kind("sequence-id")[0]

    @property
    def time_col(self) -> str:
        return self.of_kind("time-index")[0]

    def missing_count(self) -> int:
        n = 0
        for c in self.columns:
            for v in self.values[c]:
                n += v is None or (isinstance(v, float) and math.isnan(v))
        return n

    def take(self, rows) -> "RawTable":
        rows = list(rows)
        return RawTable(
            list(self.columns),
            dict(self.kinds),
            {c: [self.values[c][i] for i in rows] for c in self.columns},
        )


def load_schema(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    schema = raw.get("columns", raw) if isinstance(raw, dict) else None
    if not isinstance(schema, dict):
        raise DataError(f"{path}: schema must map column name -> kind")
    for col, kind in schema.items():
        if kind not in KINDS:
            raise DataError(f"{path}: column {col!r} has unknown kind {kind!r}")
    return schema


def load_csv(path, schema: dict) -> RawTable:
    """Parse a CSV against ``schema``; missing cells are marked, never imputed."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        unknown = [h for h in header if h not in schema]
        if unknown:
            raise DataError(f"{path}: column {unknown[0]!r} is not in the schema")
        absent = [c for c in schema if c not in header]
        if absent:
            raise DataError(f"{path}: schema column {absent[0]!r} missing from header")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        values = {c: [] for c in header}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}"
                )
            for col, cell in zip(header, row):
                kind = schema[col]
                if kind in ("sensor-numeric", "task-label"):
                    if _is_missing(cell):
                        values[col].append(math.nan)
                        continue
                    try:
                        values[col].append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"{path}: row {lineno}, column {col!r}: cannot parse {cell!r} as a number"
                        ) from None
                else:
                    values[col].append(None if _is_missing(cell) else cell)
    return RawTable(header, {c: schema[c] for c in header}, values)


def write_csv(table: RawTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(table.columns)
        for i in range(len(table)):
            row = []
            for c in table.columns:
                v = table.values[c][i]
                if v is None or (isinstance(v, float) and math.isnan(v)):
                    row.append("")
                elif isinstance(v, float):
                    row.append(repr(v))
                else:
                    row.append(v)
            w.writerow(row)


def _time_key(values: list):
    """Sort key for time stamps: numeric when every stamp parses, else lexical."""
    try:
        nums = [float(v) for v in values]
        return nums
    except (TypeError, ValueError):
        return [str(v) for v in values]


# --- splitting -------------------------------------------------------------


def time_split(table: RawTable, fractions=WEEK_FRACTIONS) -> list:
    """Chronological train/val/test tag per row.

    Distinct time stamps are cut at the cumulative fractions; every sequence
    takes the split of its earliest row, so no sample straddles a boundary.
    """
    keys = _time_key(table.values[table.time_col])
    distinct = sorted(set(keys))
    n = len(distinct)
    if n < 3:
        raise DataError(f"time split needs at least 3 distinct time stamps, got {n}")
    total = float(sum(fractions))
    c1 = min(max(1, round(n * fractions[0] / total)), n - 2)
    c2 = min(max(c1 + 1, round(n * (fractions[0] + fractions[1]) / total)), n - 1)
    rank = {t: i for i, t in enumerate(distinct)}
    seqs = table.values[table.seq_col]
    start = {}
    for s, k in zip(seqs, keys):
        start[s] = min(start.get(s, rank[k]), rank[k])
    tags = []
    for s in seqs:
        r = start[s]
        tags.append("train" if r < c1 else "val" if r < c2 else "test")
    return tags


# --- datasets --------------------------------------------------------------


@dataclass
class Dataset:
    features: np.ndarray  # [N, T, F]
    labels: np.ndarray  # [N, M] in {0, 1}
    mask: np.ndarray  # [N, M] in {0, 1}
    split: np.ndarray  # [N] of "train" / "val" / "test"
    scaler_min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scaler_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    medians: np.ndarray = field(default_factory=lambda: np.zeros(0))
    feature_names: list = field(default_factory=list)
    task_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self):
        return self.features.shape

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return np.flatnonzero(self.split == split)

    def subset(self, split: str):
        idx = self.indices(split)
        return self.features[idx], self.labels[idx], self.mask[idx]

    def replace_labels(self, labels: np.ndarray) -> "Dataset":
        out = Dataset(**{f: getattr(self, f) for f in self.__dataclass_fields__})
        out.labels = labels
        return out

    def class_counts(self, split: str = "train"):
        """Per-task (positives, negatives) among valid labels of a split."""
        _, y, m = self.subset(split)
        pos = ((y > 0.5) & (m > 0)).sum(axis=0)
        neg = ((y < 0.5) & (m > 0)).sum(axis=0)
        return pos.astype(int), neg.astype(int)

    def save(self, path) -> None:
        codes = np.array([SPLITS.index(s) for s in self.split], dtype=np.float64)
        header = {
            "kind": DATASET_KIND,
            "feature_names": list(self.feature_names),
            "task_names": list(self.task_names),
            "meta": self.meta,
        }
        write_container(
            path,
            header,
            {
                "features": self.features,
                "labels": self.labels,
                "mask": self.mask,
                "split": codes,
                "scaler_min": self.scaler_min,
                "scaler_max": self.scaler_max,
                "medians": self.medians,
            },
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        header, a = read_container(path)
        if header.get("kind") != DATASET_KIND:
            raise ContainerError(f"{path}: not a dataset cache")
        split = np.array([SPLITS[int(c)] for c in a["split"]], dtype=object)
        return cls(
            a["features"],
            a["labels"],
            a["mask"],
            split,
            a["scaler_min"],
            a["scaler_max"],
            a["medians"],
            header["feature_names"],
            header["task_names"],
            header.get("meta", {}),
        )

    def summary(self) -> str:
        """Table of per-task positive/negative counts per split."""
        lines = []
        head = ["task"] + [f"{s}_{k}" for s in SPLITS for k in ("pos", "neg")]
        rows = []
        counts = {s: self.class_counts(s) for s in SPLITS}
        for j in range(self.num_tasks):
            name = self.task_names[j] if self.task_names else f"Task-{j + 1}"
            row = [name]
            for s in SPLITS:
                row += [str(counts[s][0][j]), str(counts[s][1][j])]
            rows.append(row)
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        for r in [head] + rows:
            lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        return "\n".join(lines)


def fit_minmax(train_values: np.ndarray):
    """Column-wise min and max over training rows (NaNs ignored)."""
    return np.nanmin(train_values, axis=0), np.nanmax(train_values, axis=0)


def apply_minmax(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] with clipping; constant columns map to 0."""
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.clip((values - lo) / safe, 0.0, 1.0)
    return np.where(span > 0, out, 0.0)


def preprocess(table: RawTable, max_T: int, split=None) -> Dataset:
    """Deduplicate, impute, scale, one-hot encode and pad a raw table.

    ``split`` is a per-row list of tags; when omitted the chronological
    70/14/8-week split is used. Imputation medians, scaler bounds and
    categorical vocabularies are fit on training rows only.
    """
    if max_T < 1:
        raise DataError("max_T must be positive")
    seq_col, time_col = table.seq_col, table.time_col
    # rows identical in every column are redundant; keep the first
    seen = set()
    keep = []
    for i, key in enumerate(zip(*(map(repr, table.values[c]) for c in table.columns))):
        if key not in seen:
            seen.add(key)
            keep.append(i)
    if split is not None:
        split = [split[i] for i in keep]
    table = table.take(keep)
    tags = np.array(split if split is not None else time_split(table), dtype=object)
    train_rows = tags == "train"
    if not train_rows.any():
        raise DataError("training split is empty")

    sensors = table.of_kind("sensor-numeric")
    cats = table.of_kind("categorical")
    tasks = table.of_kind("task-label")
    n_rows = len(table)

    S = np.array([table.values[c] for c in sensors], dtype=np.float64).T.reshape(n_rows, len(sensors))
    with np.errstate(all="ignore"):
        medians = np.array(
            [np.nanmedian(S[train_rows, j]) if np.any(~np.isnan(S[train_rows, j])) else 0.0
             for j in range(S.shape[1])]
        )
    S = np.where(np.isnan(S), medians, S)
    lo, hi = (fit_minmax(S[train_rows]) if S.shape[1] else (np.zeros(0), np.zeros(0)))
    S = apply_minmax(S, lo, hi)

    blocks = [S]
    names = list(sensors)
    vocab = {}
    for c in cats:
        col = table.values[c]
        levels = sorted({v for v, t in zip(col, train_rows) if t and v is not None})
        vocab[c] = levels
        index = {v: i for i, v in enumerate(levels)}
        onehot = np.zeros((n_rows, len(levels) + 1))
        for r, v in enumerate(col):
            onehot[r, index.get(v, len(levels))] = 1.0
        blocks.append(onehot)
        names += [f"{c}={v}" for v in levels] + [f"{c}=<unknown>"]
    rowfeat = np.concatenate(blocks, axis=1)

    Y = np.array([table.values[c] for c in tasks], dtype=np.float64).T.reshape(n_rows, len(tasks))
    bad = ~np.isnan(Y) & (Y != 0.0) & (Y != 1.0)
    if bad.any():
        r, j = np.argwhere(bad)[0]
        raise DataError(f"task-label column {tasks[j]!r} holds non-binary value {Y[r, j]!r}")

    seqs = table.values[seq_col]
    tkeys = _time_key(table.values[time_col])
    groups = {}
    for r, s in enumerate(seqs):
        groups.setdefault(s, []).append(r)
    order = sorted(groups, key=lambda s: (min(tkeys[r] for r in groups[s]), str(s)))

    N, F, M = len(order), rowfeat.shape[1], len(tasks)
    X = np.zeros((N, max_T, F))
    labels = np.zeros((N, M))
    mask = np.zeros((N, M))
    seq_split = np.empty(N, dtype=object)
    for i, s in enumerate(order):
        rows = sorted(groups[s], key=lambda r: tkeys[r])[:max_T]
        X[i, : len(rows)] = rowfeat[rows]
        seq_split[i] = tags[rows[0]]
        ys = Y[groups[s]]
        seen_any = ~np.isnan(ys)
        mask[i] = seen_any.any(axis=0)
        labels[i] = np.where(seen_any, ys, 0.0).max(axis=0)
    return Dataset(
        X, labels, mask, seq_split, lo, hi, medians, names, list(tasks),
        {"source": "csv", "max_T": max_T, "vocab": vocab},
    )


# --- synthetic data --------------------------------------------------------


@dataclass
class SynthConfig:
    N: int = 4000
    T: int = 2
    F_sensor: int = 16
    F_categorical: int = 0
    M: int = 3
    positive_rate: float | list = 0.015
    snr: float | None = None  # None means noiseless
    informative: int = 3
    seed: int = 0

    def __post_init__(self):
        rates = np.broadcast_to(np.asarray(self.positive_rate, dtype=float), (self.M,))
        if np.any(rates <= 0) or np.any(rates > 0.5):
            raise ValueError("positive rates must lie in (0, 0.5]")
        if self.N < 3 or self.T < 1 or self.F_sensor < 1 or self.M < 1:
            raise ValueError("synthetic config needs N >= 3 and positive T, F_sensor, M")

    def rates(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.positive_rate, dtype=float), (self.M,)).copy()

    def to_dict(self) -> dict:
        return asdict(self)


def chrono_split(N: int, fractions=WEEK_FRACTIONS) -> np.ndarray:
    total = float(sum(fractions))
    c1 = round(N * fractions[0] / total)
    c2 = round(N * (fractions[0] + fractions[1]) / total)
    tags = np.empty(N, dtype=object)
    tags[:c1], tags[c1:c2], tags[c2:] = "train", "val", "test"
    return tags


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Imbalanced multi-task series with sparse linear threshold rules.

    Sensors follow AR(1) trajectories over time. Each task scores a random
    subset of sensors with a random linear map, adds Gaussian noise at the
    requested signal-to-noise ratio (score std / noise std), and labels the
    top ``positive_rate`` fraction positive. Samples are in chronological order
    and split 70/14/8.
    """
    rng = make_rng(cfg.seed)
    N, T, Fs, M = cfg.N, cfg.T, cfg.F_sensor, cfg.M
    raw = np.empty((N, T, Fs))
    raw[:, 0] = rng.standard_normal((N, Fs))
    for t in range(1, T):
        raw[:, t] = 0.7 * raw[:, t - 1] + math.sqrt(1 - 0.49) * rng.standard_normal((N, Fs))

    labels = np.zeros((N, M))
    k = min(cfg.informative, Fs)
    for j, rate in enumerate(cfg.rates()):
        feats = rng.choice(Fs, size=k, replace=False)
        w = rng.standard_normal((T, k))
        score = np.einsum("ntk,tk->n", raw[:, :, feats], w)
        score = (score - score.mean()) / (score.std() + 1e-12)
        if cfg.snr is not None and math.isfinite(cfg.snr):
            score = score + rng.standard_normal(N) / cfg.snr
        n_pos = max(1, int(round(rate * N)))
        labels[np.argsort(-score, kind="stable")[:n_pos], j] = 1.0

    split = chrono_split(N)
    train = split == "train"
    flat = raw.reshape(N * T, Fs)
    lo, hi = fit_minmax(raw[train].reshape(-1, Fs))
    X = apply_minmax(flat, lo, hi).reshape(N, T, Fs)
    names = [f"sensor_{i}" for i in range(Fs)]
    if cfg.F_categorical > 0:
        level = rng.integers(0, cfg.F_categorical, size=N)
        onehot = np.zeros((N, T, cfg.F_categorical))
        onehot[np.arange(N), :, level] = 1.0
        X = np.concatenate([X, onehot], axis=2)
        names += [f"cat={i}" for i in range(cfg.F_categorical)]
    return Dataset(
        X, labels, np.ones((N, M)), split, lo, hi, np.zeros(Fs), names,
        [f"Task-{j + 1}" for j in range(M)], {"source": "synth", "synth": cfg.to_dict()},
    )


# --- label corruption ------------------------------------------------------


@dataclass
class CorruptionSpec:
    fraction: float = 0.0
    task: int | None = None  # None corrupts every task
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError(f"flip fraction must be in [0, 1), got {self.fraction}")

    def to_dict(self) -> dict:
        return asdict(self)


def flip_indices(ds: Dataset, spec: CorruptionSpec) -> dict:
    """Rows to flip per task: floor(p * #pos) positives and floor(p * #neg) negatives
    drawn uniformly from valid training labels."""
    rng = make_rng([spec.seed, 0xF11B])
    train = ds.split == "train"
    tasks = range(ds.num_tasks) if spec.task is None else [spec.task]
    out = {}
    for j in tasks:
        valid = train & (ds.mask[:, j] > 0)
        pos = np.flatnonzero(valid & (ds.labels[:, j] > 0.5))
        neg = np.flatnonzero(valid & (ds.labels[:, j] < 0.5))
        n_pos = math.floor(spec.fraction * len(pos))
        n_neg = math.floor(spec.fraction * len(neg))
        chosen = np.concatenate(
            [rng.choice(pos, size=n_pos, replace=False), rng.choice(neg, size=n_neg, replace=False)]
        ).astype(int)
        out[j] = np.sort(chosen)
    return out


def apply_flips(ds: Dataset, flips: dict) -> Dataset:
    labels = ds.labels.copy()
    for j, rows in flips.items():
        labels[rows, j] = 1.0 - labels[rows, j]
    return ds.replace_labels(labels)


def corrupt_labels(ds: Dataset, spec: CorruptionSpec) -> Dataset:
    if spec.fraction == 0.0:
        return ds.replace_labels(ds.labels.copy())
    return apply_flips(ds, flip_indices(ds, spec))
