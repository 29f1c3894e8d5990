"""Interaction-log ingestion, k-core filtering, leave-one-out splits and reversal.

Item index 0 is the padding token everywhere in this package. Sequences are
left-padded so the most recent interaction always sits in the last slot.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
FORWARD = "forward"
REVERSED = "reversed"

DATASET_SCHEMA = "apc.dataset/1"
_TRAIN_MAGIC = b"APCD"
_TRAIN_HEADER = struct.Struct("<4sIII")  # magic, version, n_users, max_len


class ConfigError(ValueError):
    """Invalid configuration value or tag."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class Event(NamedTuple):
    user: str
    item: str
    timestamp: int


@dataclass
class EventLog:
    records: list[Event] = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return len(self.records)

    def user_counts(self) -> Counter:
        return Counter(r.user for r in self.records)

    def item_counts(self) -> Counter:
        return Counter(r.item for r in self.records)


@dataclass
class Catalog:
    """Dense index maps. Users map to [0, n_users), items to [1, n_items]."""

    users: list[str]
    items: list[str]

    def __post_init__(self):
        self.user_index = {u: i for i, u in enumerate(self.users)}
        self.item_index = {v: i + 1 for i, v in enumerate(self.items)}

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def item_id(self, index: int) -> str:
        if index == PAD:
            raise IndexError("index 0 is the padding token")
        return self.items[index - 1]

    def to_json(self) -> dict:
        return {"schema": "apc.catalog/1", "users": self.users, "items": self.items}

    @classmethod
    def from_json(cls, obj: dict) -> "Catalog":
        if obj.get("schema") != "apc.catalog/1":
            raise ConfigError(f"unsupported catalog schema {obj.get('schema')!r}")
        return cls(users=list(obj["users"]), items=list(obj["items"]))


@dataclass
class InteractionSequence:
    user: int
    items: np.ndarray  # T slots, 0 = pad
    valid: int | None = None
    test: int | None = None

    @property
    def real(self) -> np.ndarray:
        return self.items[self.items != PAD]


@dataclass
class SequenceDataset:
    """Fixed-length padded sequences for all users.

    ``items`` has shape (n_users, max_len); row ``i`` belongs to ``users[i]``.
    ``valid``/``test`` hold the held-out targets (0 when absent).
    """

    items: np.ndarray
    n_items: int
    users: np.ndarray | None = None
    valid: np.ndarray | None = None
    test: np.ndarray | None = None
    direction: str = FORWARD

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        if self.items.ndim != 2:
            raise ContractError("items must be a 2-d array")
        n = self.items.shape[0]
        if self.users is None:
            self.users = np.arange(n, dtype=np.int64)
        for name in ("valid", "test"):
            arr = getattr(self, name)
            if arr is not None:
                setattr(self, name, np.asarray(arr, dtype=np.int64))
        if self.direction not in (FORWARD, REVERSED):
            raise ConfigError(f"unknown direction {self.direction!r}")

    def __len__(self):
        return self.items.shape[0]

    @property
    def max_len(self) -> int:
        return self.items.shape[1]

    def __getitem__(self, i: int) -> InteractionSequence:
        return InteractionSequence(
            user=int(self.users[i]),
            items=self.items[i],
            valid=None if self.valid is None else int(self.valid[i]) or None,
            test=None if self.test is None else int(self.test[i]) or None,
        )

    def lengths(self) -> np.ndarray:
        return (self.items != PAD).sum(axis=1)

    def with_appended(self, targets: np.ndarray) -> "SequenceDataset":
        """Shift every row left by one and append ``targets`` in the last slot.

        Used to build the test-time input (training span + validation item).
        """
        if self.direction != FORWARD:
            raise ContractError("appending targets only makes sense on forward data")
        items = np.concatenate([self.items[:, 1:], np.asarray(targets)[:, None]], axis=1)
        return replace(self, items=items, valid=None)

    def test_inputs(self) -> "SequenceDataset":
        if self.valid is None or self.test is None:
            raise ContractError("dataset has no validation/test targets")
        return self.with_appended(self.valid)

    def valid_inputs(self) -> "SequenceDataset":
        if self.valid is None:
            raise ContractError("dataset has no validation targets")
        return replace(self, test=self.valid)


def _parse_ml(line: str):
    parts = line.split("::")
    if len(parts) != 4:
        raise ValueError("expected 4 '::'-separated fields")
    return parts[0], parts[1], int(parts[3])


def _parse_tsv(line: str):
    parts = line.split("\t")
    if len(parts) < 4:
        raise ValueError("expected 4 tab-separated fields")
    return parts[0], parts[1], int(float(parts[3]))


_LINE_PARSERS = {"ml": _parse_ml, "tsv": _parse_tsv}
FORMATS = ("ml", "csv", "tsv")


def load_events(path: str | os.PathLike, format: str = "ml") -> EventLog:
    """Read an interaction log.

    Formats: ``ml`` (``user::item::rating::timestamp``), ``csv`` (header with
    ``user,item,timestamp`` and an optional ignored ``rating`` column) and
    ``tsv`` (MovieLens-100k ``u.data`` layout, optional ``user...`` header line). Malformed lines are skipped and
    counted in ``EventLog.skipped``.
    """
    if format not in FORMATS:
        raise ConfigError(f"unknown format tag {format!r}; expected one of {FORMATS}")
    log = EventLog()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        if format == "csv":
            reader = csv.DictReader(fh)
            missing = {"user", "item", "timestamp"} - set(reader.fieldnames or [])
            if reader.fieldnames is not None and missing:
                raise ConfigError(f"csv header lacks columns {sorted(missing)}")
            for row in reader:
                try:
                    user, item = row["user"].strip(), row["item"].strip()
                    ts = int(float(row["timestamp"]))
                    if not user or not item:
                        raise ValueError("empty id")
                except (ValueError, TypeError, AttributeError):
                    log.skipped += 1
                    continue
                log.records.append(Event(user, item, ts))
        else:
            parse = _LINE_PARSERS[format]
            for lineno, raw in enumerate(fh):
                line = raw.rstrip("\r\n")
                if not line.strip():
                    continue
                if lineno == 0 and format == "tsv" and line.lower().startswith("user"):
                    continue  # column header
                try:
                    user, item, ts = parse(line)
                    user, item = user.strip(), item.strip()
                    if not user or not item:
                        raise ValueError("empty id")
                except ValueError:
                    log.skipped += 1
                    continue
                log.records.append(Event(user, item, ts))
    if log.skipped:
        logger.warning("%s: skipped %d malformed line(s)", path, log.skipped)
    return log


def k_core_filter(log: EventLog, k: int = 5, iterate: bool = True) -> EventLog:
    """Drop users and items with fewer than ``k`` interactions.

    With ``iterate`` (default) the filter repeats until nothing changes, so the
    output is a true k-core. ``iterate=False`` runs a single pass.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    records = log.records
    while True:
        users = Counter(r.user for r in records)
        items = Counter(r.item for r in records)
        kept = [r for r in records if users[r.user] >= k and items[r.item] >= k]
        done = len(kept) == len(records)
        records = kept
        if done or not iterate:
            break
    if not records:
        logger.warning("k-core filter with k=%d removed every record", k)
    return EventLog(records=records, skipped=log.skipped)


def _group_by_user(log: EventLog) -> dict[str, list[str]]:
    # dict preserves first-appearance order; the stable sort keeps file order on ties
    order = sorted(range(len(log.records)), key=lambda i: log.records[i].timestamp)
    by_user: dict[str, list[str]] = {}
    for r in log.records:
        by_user.setdefault(r.user, [])
    for i in order:
        r = log.records[i]
        by_user[r.user].append(r.item)
    return by_user


def build_split_sequences(log: EventLog, max_len: int) -> tuple[SequenceDataset, Catalog]:
    """Leave-one-out split: last event is the test target, second-to-last validation."""
    if max_len < 1:
        raise ConfigError("max_len must be positive")
    by_user = _group_by_user(log)
    short = [u for u, seq in by_user.items() if len(seq) < 3]
    if short:
        logger.warning("excluding %d user(s) with fewer than 3 interactions", len(short))
    by_user = {u: seq for u, seq in by_user.items() if len(seq) >= 3}

    item_order: dict[str, None] = {}
    for r in log.records:
        if r.user in by_user:
            item_order.setdefault(r.item, None)
    catalog = Catalog(users=list(by_user), items=list(item_order))

    n = len(by_user)
    items = np.zeros((n, max_len), dtype=np.int64)
    valid = np.zeros(n, dtype=np.int64)
    test = np.zeros(n, dtype=np.int64)
    for row, seq in enumerate(by_user.values()):
        idx = [catalog.item_index[v] for v in seq]
        span = idx[:-2][-max_len:]
        items[row, max_len - len(span):] = span
        valid[row], test[row] = idx[-2], idx[-1]
    ds = SequenceDataset(items=items, n_items=catalog.n_items, valid=valid, test=test)
    return ds, catalog


def reverse_rows(items: np.ndarray) -> np.ndarray:
    """Reverse the real span of every left-padded row, keeping padding on the left."""
    items = np.asarray(items)
    out = np.zeros_like(items)
    lengths = (items != PAD).sum(axis=1)
    width = items.shape[1]
    for i, n in enumerate(lengths):
        if n:
            out[i, width - n:] = items[i, width - n:][::-1]
    return out


def reverse_dataset(ds: SequenceDataset) -> SequenceDataset:
    if ds.direction != FORWARD:
        raise ContractError("reverse_dataset expects a forward-direction dataset")
    return replace(ds, items=reverse_rows(ds.items), direction=REVERSED)


# -- persistence ------------------------------------------------------------


def save_dataset(ds: SequenceDataset, catalog: Catalog | None, path: str | os.PathLike) -> Path:
    """Write ``catalog.json``, ``train.bin``, ``valid.json`` and ``test.json`` into ``path``.

    ``train.bin`` is a 16-byte little-endian header (magic ``APCD``, version,
    n_users, max_len) followed by the int32 item matrix in row-major order.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if catalog is None:
        catalog = Catalog(users=[str(u) for u in ds.users.tolist()],
                          items=[str(i) for i in range(1, ds.n_items + 1)])
    with open(out / "catalog.json", "w", encoding="utf-8") as fh:
        json.dump(catalog.to_json(), fh)
    with open(out / "train.bin", "wb") as fh:
        fh.write(_TRAIN_HEADER.pack(_TRAIN_MAGIC, 1, len(ds), ds.max_len))
        fh.write(ds.items.astype("<i4").tobytes())
    meta = {"schema": DATASET_SCHEMA, "direction": ds.direction, "n_items": ds.n_items}
    for name in ("valid", "test"):
        arr = getattr(ds, name)
        with open(out / f"{name}.json", "w", encoding="utf-8") as fh:
            json.dump({**meta, "targets": None if arr is None else arr.tolist()}, fh)
    return out


def load_dataset(path: str | os.PathLike) -> tuple[SequenceDataset, Catalog]:
    src = Path(path)
    with open(src / "catalog.json", encoding="utf-8") as fh:
        catalog = Catalog.from_json(json.load(fh))
    with open(src / "train.bin", "rb") as fh:
        magic, version, n_users, max_len = _TRAIN_HEADER.unpack(fh.read(_TRAIN_HEADER.size))
        if magic != _TRAIN_MAGIC or version != 1:
            raise ConfigError(f"{src / 'train.bin'}: not a version-1 APC dataset")
        items = np.frombuffer(fh.read(), dtype="<i4").astype(np.int64)
    items = items.reshape(n_users, max_len)
    targets = {}
    for name in ("valid", "test"):
        with open(src / f"{name}.json", encoding="utf-8") as fh:
            obj = json.load(fh)
        if obj.get("schema") != DATASET_SCHEMA:
            raise ConfigError(f"unsupported dataset schema {obj.get('schema')!r}")
        targets[name] = None if obj["targets"] is None else np.asarray(obj["targets"])
        direction, n_items = obj["direction"], obj["n_items"]
    ds = SequenceDataset(items=items, n_items=n_items, direction=direction, **targets)
    return ds, catalog
