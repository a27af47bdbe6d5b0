"""Interaction logs, leave-one-out splits and padded batches."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, path, lineno: int, line: str, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}: {line!r}")
        self.lineno = lineno


class EmptyDatasetError(DatasetError):
    pass


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    sequence: np.ndarray  # dense item indices, chronological


@dataclass(frozen=True)
class InteractionDataset:
    users: tuple[UserRecord, ...]
    item_ids: tuple[str, ...]  # dense index -> raw id

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_actions(self) -> int:
        return sum(len(u.sequence) for u in self.users)

    @property
    def user_ids(self) -> tuple[str, ...]:
        return tuple(u.user_id for u in self.users)

    def item_index(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.item_ids)}

    def user_index(self) -> dict[str, int]:
        return {u.user_id: i for i, u in enumerate(self.users)}

    def decode_items(self, indices) -> list[str]:
        return [self.item_ids[int(i)] for i in indices]


def load_interactions(path: str | Path, format: str = "movielens100k") -> InteractionDataset:
    """Read a tab-separated interaction log.

    ``movielens100k`` rows are ``user item rating timestamp``; ``tsv_triples``
    rows are ``user item timestamp``. Each user's items are ordered by
    timestamp with ties kept in file order, then users and items are given
    dense indices in order of first appearance.
    """
    if format == "movielens100k":
        ncols, ts_col = 4, 3
    elif format == "tsv_triples":
        ncols, ts_col = 3, 2
    else:
        raise DatasetError(f"unknown interaction format: {format!r}")

    events: dict[str, list[tuple[float, int, int]]] = {}
    item_index: dict[str, int] = {}
    order = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.rstrip("\r\n")
            if not stripped.strip():
                continue
            parts = stripped.split("\t")
            if len(parts) != ncols:
                raise ParseError(path, lineno, stripped, f"expected {ncols} tab-separated fields")
            user, item = parts[0].strip(), parts[1].strip()
            if not user or not item:
                raise ParseError(path, lineno, stripped, "empty user or item id")
            try:
                ts = float(parts[ts_col])
                if ncols == 4:
                    float(parts[2])
            except ValueError:
                raise ParseError(path, lineno, stripped, "non-numeric rating or timestamp") from None
            idx = item_index.setdefault(item, len(item_index))
            events.setdefault(user, []).append((ts, order, idx))
            order += 1
    if not events:
        raise EmptyDatasetError(f"{path}: no interactions")

    users = []
    for user, user_events in events.items():
        user_events.sort(key=lambda e: (e[0], e[1]))
        seq = np.fromiter((it for _, _, it in user_events), dtype=np.int64)
        users.append(UserRecord(user, seq))
    return InteractionDataset(tuple(users), tuple(item_index))


@dataclass(frozen=True)
class SplitView:
    """Prediction pairs ``prefix -> target``; prefixes are views into user sequences."""

    name: str
    users: np.ndarray
    prefixes: tuple[np.ndarray, ...]
    targets: np.ndarray
    num_items: int

    def __len__(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class Split:
    train: SplitView
    valid: SplitView
    test: SplitView
    dropped_users: int


def leave_one_out_split(ds: InteractionDataset, augment_window: int | None = None) -> Split:
    """Hold out the last item for test and the second-to-last for validation.

    Every next-item pair inside the remaining training region becomes a
    training example (``augment_window`` keeps only each user's most recent
    ones). Users with fewer than three interactions are dropped.
    """
    tr_u, tr_p, tr_t = [], [], []
    va_u, va_p, va_t = [], [], []
    te_u, te_p, te_t = [], [], []
    dropped = 0
    for uidx, rec in enumerate(ds.users):
        seq = rec.sequence
        m = len(seq)
        if m < 3:
            dropped += 1
            continue
        # targets at 0-based positions 1..m-3, each with a non-empty prefix
        positions = range(1, m - 2)
        if augment_window is not None:
            positions = positions[-augment_window:] if augment_window > 0 else range(0)
        for j in positions:
            tr_u.append(uidx)
            tr_p.append(seq[:j])
            tr_t.append(seq[j])
        va_u.append(uidx)
        va_p.append(seq[: m - 2])
        va_t.append(seq[m - 2])
        te_u.append(uidx)
        te_p.append(seq[: m - 1])
        te_t.append(seq[m - 1])
    if dropped:
        logger.info("dropped %d users with fewer than 3 interactions", dropped)

    def view(name, u, p, t):
        return SplitView(name, np.asarray(u, dtype=np.int64), tuple(p),
                         np.asarray(t, dtype=np.int64), ds.num_items)

    return Split(
        view("train", tr_u, tr_p, tr_t),
        view("valid", va_u, va_p, va_t),
        view("test", te_u, te_p, te_t),
        dropped,
    )


@dataclass(frozen=True)
class Batch:
    item_ids: np.ndarray  # [B, max_len], left-padded with num_items
    target_ids: np.ndarray  # [B]
    lengths: np.ndarray  # [B] true (untruncated) prefix lengths
    interaction_vectors: np.ndarray  # [B, num_items] float32 in {0, 1}

    def __len__(self) -> int:
        return len(self.target_ids)


def pad_sequences(prefixes, max_len: int, pad: int) -> np.ndarray:
    """Keep the newest ``max_len`` items of each prefix and left-pad with ``pad``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    out = np.full((len(prefixes), max_len), pad, dtype=np.int64)
    for row, seq in enumerate(prefixes):
        tail = seq[-max_len:]
        if len(tail):
            out[row, max_len - len(tail):] = tail
    return out


def interaction_vectors(prefixes, num_items: int) -> np.ndarray:
    out = np.zeros((len(prefixes), num_items), dtype=np.float32)
    for row, seq in enumerate(prefixes):
        out[row, seq] = 1.0
    return out


def build_batch(view: SplitView, indices, max_len: int) -> Batch:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    indices = np.asarray(indices, dtype=np.int64)
    prefixes = [view.prefixes[i] for i in indices]
    return Batch(
        item_ids=pad_sequences(prefixes, max_len, view.num_items),
        target_ids=view.targets[indices].copy(),
        lengths=np.array([len(p) for p in prefixes], dtype=np.int64),
        interaction_vectors=interaction_vectors(prefixes, view.num_items),
    )
