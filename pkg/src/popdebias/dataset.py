"""Interaction logs, chronological staging and per-stage popularity statistics."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_SCHEMA = ("user_id", "item_id", "timestamp", "clicked", "post_clicked")
MINMAX_DELTA = 1e-6

_SPLIT_RE = re.compile(r"[\t,]|\s+")


class DataError(ValueError):
    """Raised for malformed or inconsistent interaction data."""


@dataclass(frozen=True)
class InteractionLog:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    clicked: np.ndarray
    post_clicked: np.ndarray
    num_users: int
    num_items: int

    def __post_init__(self):
        n = len(self.users)
        for name in ("items", "timestamps", "clicked", "post_clicked"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataError("item index out of range")
        if np.any((self.post_clicked == 1) & (self.clicked == 0)):
            raise DataError("post_clicked=1 requires clicked=1")

    @classmethod
    def from_arrays(cls, users, items, timestamps=None, clicked=None, post_clicked=None,
                    num_users=None, num_items=None) -> "InteractionLog":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        n = len(users)
        timestamps = np.arange(n, dtype=np.int64) if timestamps is None else np.asarray(timestamps, dtype=np.int64)
        clicked = np.ones(n, dtype=np.int8) if clicked is None else np.asarray(clicked, dtype=np.int8)
        post_clicked = np.zeros(n, dtype=np.int8) if post_clicked is None else np.asarray(post_clicked, dtype=np.int8)
        if num_users is None:
            num_users = int(users.max()) + 1 if n else 0
        if num_items is None:
            num_items = int(items.max()) + 1 if n else 0
        return cls(users, items, timestamps, clicked, post_clicked, int(num_users), int(num_items))

    def __len__(self) -> int:
        return len(self.users)

    def subset(self, idx) -> "InteractionLog":
        return InteractionLog(self.users[idx], self.items[idx], self.timestamps[idx],
                              self.clicked[idx], self.post_clicked[idx],
                              self.num_users, self.num_items)

    def sorted(self) -> "InteractionLog":
        # stable: timestamp ties keep input order
        return self.subset(np.argsort(self.timestamps, kind="stable"))

    @classmethod
    def concat(cls, logs: Sequence["InteractionLog"]) -> "InteractionLog":
        if not logs:
            raise DataError("nothing to concatenate")
        first = logs[0]
        return cls(np.concatenate([l.users for l in logs]),
                   np.concatenate([l.items for l in logs]),
                   np.concatenate([l.timestamps for l in logs]),
                   np.concatenate([l.clicked for l in logs]),
                   np.concatenate([l.post_clicked for l in logs]),
                   first.num_users, first.num_items)

    def item_counts(self, source: str = "clicks") -> np.ndarray:
        """Per-item interaction counts; ``source`` is ``clicks`` or ``post``."""
        if source == "clicks":
            mask = self.clicked == 1
        elif source == "post":
            mask = self.post_clicked == 1
        else:
            raise ValueError(f"unknown popularity source {source!r}")
        return np.bincount(self.items[mask], minlength=self.num_items).astype(np.int64)

    def user_item_sets(self, clicked_only: bool = True) -> list[set[int]]:
        mask = self.clicked == 1 if clicked_only else np.ones(len(self), dtype=bool)
        sets: list[set[int]] = [set() for _ in range(self.num_users)]
        for u, i in zip(self.users[mask].tolist(), self.items[mask].tolist()):
            sets[u].add(i)
        return sets


@dataclass(frozen=True)
class IdMapping:
    users: np.ndarray  # dense index -> original id
    items: np.ndarray

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("kind\toriginal_id\tindex\n")
            for kind, ids in (("user", self.users), ("item", self.items)):
                for idx, orig in enumerate(ids.tolist()):
                    fh.write(f"{kind}\t{orig}\t{idx}\n")


@dataclass(frozen=True)
class StagedInteractions:
    stages: tuple[InteractionLog, ...]
    stage_boundaries: np.ndarray  # first timestamp of each stage

    @property
    def T(self) -> int:
        return len(self.stages)

    @property
    def num_items(self) -> int:
        return self.stages[0].num_items

    @property
    def num_users(self) -> int:
        return self.stages[0].num_users

    def merged(self) -> InteractionLog:
        return InteractionLog.concat(self.stages)

    def stage_index(self) -> np.ndarray:
        """Stage id of every record of ``merged()``."""
        return np.concatenate([np.full(len(s), t, dtype=np.int64) for t, s in enumerate(self.stages)])


@dataclass(frozen=True)
class PopularityTable:
    m: np.ndarray  # [T, num_items] local popularity fractions
    D: np.ndarray  # [T, num_items] raw counts
    r: np.ndarray  # quality ratio, NaN where undefined
    z: np.ndarray  # min-max normalized popularity
    r_defined: np.ndarray = field(default=None)

    @property
    def T(self) -> int:
        return self.m.shape[0]

    def floor(self, t: int) -> float:
        """Laplace-style floor for zero-popularity factors of stage ``t``."""
        return popularity_floor(self.D[t])

    def factor(self, t: int, items=None) -> np.ndarray:
        """Popularity of stage ``t`` with zero entries replaced by the stage floor."""
        row = self.m[t] if items is None else self.m[t][items]
        return np.where(row > 0, row, self.floor(t))


def popularity_floor(counts: np.ndarray) -> float:
    return 1.0 / (float(np.sum(counts)) + len(counts))


def load_interactions(path, schema: Sequence[str] = DEFAULT_SCHEMA, header: bool = False,
                      min_interactions: int = 0) -> tuple[InteractionLog, IdMapping]:
    """Parse a TSV/CSV interaction file and re-index ids densely.

    ``schema`` names the columns in file order; ``clicked`` and ``post_clicked``
    may be absent from the file, in which case every row counts as a click.
    """
    schema = list(schema)
    required = {"user_id", "item_id", "timestamp"}
    if not required.issubset(schema):
        raise DataError(f"schema must contain {sorted(required)}")
    text = Path(path).read_text().splitlines()
    rows = []
    width = None
    for lineno, line in enumerate(text, start=1):
        if header and lineno == 1:
            continue
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p for p in _SPLIT_RE.split(line) if p != ""]
        if width is None:
            width = len(parts)
            if width not in (3, len(schema)) or width < 3:
                raise DataError(f"line {lineno}: expected 3 or {len(schema)} columns, got {width}")
        elif len(parts) != width:
            raise DataError(f"line {lineno}: inconsistent label columns ({len(parts)} fields, expected {width})")
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise DataError(f"line {lineno}: malformed row {line!r}") from None
        rows.append(vals)
    if not rows:
        raise DataError("no records")
    arr = np.asarray(rows, dtype=np.int64)
    cols = schema[:width]
    col = {name: arr[:, k] for k, name in enumerate(cols)}
    n = len(arr)
    clicked = col.get("clicked", np.ones(n, dtype=np.int64))
    post = col.get("post_clicked", np.zeros(n, dtype=np.int64))
    for name, values in (("clicked", clicked), ("post_clicked", post)):
        bad = np.flatnonzero((values != 0) & (values != 1))
        if len(bad):
            raise DataError(f"line {_line_of(text, header, bad[0])}: {name} must be 0 or 1")
    bad = np.flatnonzero((post == 1) & (clicked == 0))
    if len(bad):
        raise DataError(f"line {_line_of(text, header, bad[0])}: post_clicked=1 with clicked=0")

    users_orig, items_orig = col["user_id"], col["item_id"]
    keep = np.ones(n, dtype=bool)
    if min_interactions > 0:
        keep = _min_count_filter(users_orig, items_orig, min_interactions)
        if not keep.any():
            raise DataError("no records left after min-interactions filter")
    uniq_u, u_idx = np.unique(users_orig[keep], return_inverse=True)
    uniq_i, i_idx = np.unique(items_orig[keep], return_inverse=True)
    log = InteractionLog(u_idx.astype(np.int64), i_idx.astype(np.int64), col["timestamp"][keep],
                         clicked[keep].astype(np.int8), post[keep].astype(np.int8),
                         len(uniq_u), len(uniq_i))
    return log, IdMapping(uniq_u, uniq_i)


def _line_of(lines, header, record_idx) -> int:
    seen = -1
    for lineno, line in enumerate(lines, start=1):
        if header and lineno == 1:
            continue
        if line.strip() and not line.strip().startswith("#"):
            seen += 1
            if seen == record_idx:
                return lineno
    return -1


def _min_count_filter(users, items, k) -> np.ndarray:
    keep = np.ones(len(users), dtype=bool)
    while True:
        _, ui, uc = np.unique(users[keep], return_inverse=True, return_counts=True)
        _, ii, ic = np.unique(items[keep], return_inverse=True, return_counts=True)
        ok = (uc[ui] >= k) & (ic[ii] >= k)
        if ok.all():
            return keep
        idx = np.flatnonzero(keep)
        keep[idx[~ok]] = False
        if not keep.any():
            return keep


def write_interactions(log: InteractionLog, path) -> None:
    data = np.column_stack([log.users, log.items, log.timestamps, log.clicked, log.post_clicked])
    with open(path, "w") as fh:
        for row in data.tolist():
            fh.write("\t".join(map(str, row)) + "\n")


def split_stages(log: InteractionLog, T: int) -> StagedInteractions:
    """Sort chronologically and cut into ``T`` stages of near-equal record counts.

    The first ``N mod T`` stages receive one extra record.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if len(log) == 0:
        raise DataError("cannot stage an empty log")
    if T > len(log):
        raise ValueError(f"T={T} exceeds the number of records ({len(log)})")
    ordered = log.sorted()
    parts = np.array_split(np.arange(len(ordered)), T)
    stages = tuple(ordered.subset(p) for p in parts)
    bounds = np.array([s.timestamps[0] for s in stages], dtype=np.int64)
    return StagedInteractions(stages, bounds)


def chrono_split(log: InteractionLog, ratios=(0.8, 0.1, 0.1)) -> tuple[InteractionLog, InteractionLog, InteractionLog]:
    """Chronological train/valid/test split by record count.

    Train takes ``floor(N * r_train)`` records, valid ``ceil(N * r_valid)``,
    test the remainder.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    n = len(log)
    n_train = int(math.floor(n * ratios[0] + 1e-9))
    n_valid = int(math.ceil(n * ratios[1] - 1e-9))
    n_valid = min(n_valid, n - n_train)
    sizes = (n_train, n_valid, n - n_train - n_valid)
    for name, size in zip(("train", "valid", "test"), sizes):
        if size == 0:
            raise DataError(f"empty {name} partition")
    ordered = log.sorted()
    idx = np.arange(n)
    return (ordered.subset(idx[:n_train]),
            ordered.subset(idx[n_train:n_train + n_valid]),
            ordered.subset(idx[n_train + n_valid:]))


def compute_local_popularity(staged: StagedInteractions, t: int, source: str = "clicks") -> np.ndarray:
    if not 0 <= t < staged.T:
        raise IndexError(f"stage {t} out of range [0, {staged.T})")
    counts = staged.stages[t].item_counts(source)
    total = counts.sum()
    if total == 0:
        raise DataError(f"stage {t} has no interactions")
    return counts / total


def compute_quality_ratio(log: InteractionLog) -> tuple[np.ndarray, np.ndarray]:
    """Post-click / click ratio per item.

    Returns ``(r, defined)``; ``r`` is NaN where the item has no clicks.
    """
    n_c = log.item_counts("clicks")
    n_l = log.item_counts("post")
    defined = n_c > 0
    r = np.full(log.num_items, np.nan)
    r[defined] = n_l[defined] / n_c[defined]
    return r, defined


def minmax_normalize(values, delta: float = MINMAX_DELTA) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in input")
    lo, hi = x.min(), x.max()
    return (x - lo + delta) / (hi - lo + delta)


def fill_undefined_ratio(r: np.ndarray, defined: np.ndarray, log: InteractionLog) -> np.ndarray:
    """Replace undefined ratios by the global post-click/click ratio."""
    out = r.copy()
    clicks = int((log.clicked == 1).sum())
    fallback = float((log.post_clicked == 1).sum()) / clicks if clicks else 0.0
    out[~defined] = fallback
    return out


def popularity_table(staged: StagedInteractions, source: str = "clicks") -> PopularityTable:
    D = np.stack([s.item_counts(source) for s in staged.stages])
    totals = D.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        m = np.where(totals > 0, D / np.maximum(totals, 1), 0.0)
    merged = staged.merged()
    r, defined = compute_quality_ratio(merged)
    z = minmax_normalize(merged.item_counts("clicks"))
    return PopularityTable(m=m, D=D, r=r, z=z, r_defined=defined)
