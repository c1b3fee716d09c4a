"""Event-log ingestion, a synthetic long-history generator, and
train/test splitting.

TSV schema (UTF-8, LF, header row, base-10 integers)::

    user_id<TAB>item_id<TAB>event_type<TAB>timestamp
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyAfterFilter, InvalidConfig, MalformedRow, MissingColumn, SequenceTooShort
from .seqcore import Dataset, Event, SegmentationPlan, build_plan

COLUMNS = ("user_id", "item_id", "event_type", "timestamp")


def ingest_tsv(path, min_events: int = 2, max_events: Optional[int] = None) -> Dataset:
    """Load an event log, keep users with at least ``min_events`` events,
    truncate to the last ``max_events`` and re-index users and items densely.

    New ids follow ascending original ids. Events of one user are stably
    sorted by timestamp, so ties keep file order.
    """
    per_user = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            raise MissingColumn("empty file, no header")
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"missing column(s): {', '.join(missing)}")
        idx = [header.index(c) for c in COLUMNS]
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                user, item, etype, ts = (int(row[i]) for i in idx)
            except (ValueError, IndexError) as exc:
                raise MalformedRow(line_no, str(exc)) from None
            per_user[user].append((ts, item, etype))

    min_events = max(2, min_events)
    kept = {}
    for user in sorted(per_user):
        rows = per_user[user]
        if len(rows) < min_events:
            continue
        rows = sorted(rows, key=lambda r: r[0])  # stable
        if max_events is not None:
            rows = rows[-max_events:]
        kept[user] = rows
    if not kept:
        raise EmptyAfterFilter(f"no user has >= {min_events} events")

    originals = sorted({item for rows in kept.values() for _, item, _ in rows})
    item_index = {orig: new for new, orig in enumerate(originals)}
    users = []
    for new_user, rows in enumerate(kept.values()):
        users.append(tuple(Event(new_user, item_index[item], etype, ts) for ts, item, etype in rows))
    return Dataset(
        tuple(users), len(originals), metadata=f"tsv:{path}",
        item_map=tuple(originals), user_map=tuple(kept),
    )


def write_tsv(dataset: Dataset, path) -> None:
    """Write events with original ids where a map is available."""
    item_map = dataset.item_map
    user_map = dataset.user_map
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("\t".join(COLUMNS) + "\n")
        for events in dataset.users:
            for e in events:
                item = item_map[e.item_id] if item_map else e.item_id
                user = user_map[e.user_id] if user_map else e.user_id
                fh.write(f"{user}\t{item}\t{e.event_type}\t{e.timestamp}\n")


def write_item_map(dataset: Dataset, path) -> None:
    originals = dataset.item_map or tuple(range(dataset.vocab_size))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("new_id\toriginal_id\n")
        for new, orig in enumerate(originals):
            fh.write(f"{new}\t{orig}\n")


def read_item_map(path) -> tuple:
    with open(path, encoding="utf-8") as fh:
        next(fh)
        rows = [tuple(int(x) for x in line.split("\t")) for line in fh if line.strip()]
    return tuple(orig for _, orig in sorted(rows))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Clustered user histories with a long-lived preference.

    Each user owns one preference cluster (a contiguous block of
    ``vocab_size // num_clusters`` items) and a small personal set of
    favourite items inside it. An event comes from the preference cluster
    with probability ``p_long``; otherwise it is background traffic, drawn
    uniformly with probability ``noise_floor`` and otherwise from a
    short-term interest cluster that jumps to a random cluster with
    probability ``drift_rate`` per event.

    Inside the preference cluster a draw hits the favourites with
    probability ``favorite_share``, else follows a Zipf popularity tilt
    shared by all users of the cluster.
    """

    num_users: int = 2000
    vocab_size: int = 2048
    num_clusters: int = 16
    seq_len: int = 100
    p_long: float = 0.7
    noise_floor: float = 1.0
    drift_rate: float = 0.05
    zipf_exponent: float = 1.0
    num_favorites: int = 8
    favorite_share: float = 0.5
    num_event_types: int = 6
    seed: int = 0

    def validate(self) -> None:
        for name in ("p_long", "noise_floor", "drift_rate", "favorite_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidConfig(f"{name}={v} is not a probability")
        if min(self.num_users, self.vocab_size, self.num_clusters, self.seq_len, self.num_event_types) < 1:
            raise InvalidConfig("counts must be positive")
        if self.seq_len < 2:
            raise InvalidConfig("seq_len must be >= 2")
        if self.vocab_size % self.num_clusters:
            raise InvalidConfig(f"vocab_size {self.vocab_size} not divisible by {self.num_clusters} clusters")
        if self.num_favorites < 0:
            raise InvalidConfig("num_favorites must be >= 0")


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    size = cfg.vocab_size // cfg.num_clusters
    item_cluster = np.repeat(np.arange(cfg.num_clusters), size)
    zipf = 1.0 / np.arange(1, size + 1) ** cfg.zipf_exponent
    zipf /= zipf.sum()
    # popularity order inside each cluster, shared by its users
    popularity = np.stack([rng.permutation(size) for _ in range(cfg.num_clusters)])

    n_fav = min(cfg.num_favorites, size)
    user_cluster = rng.integers(0, cfg.num_clusters, size=cfg.num_users)
    users = []
    T = cfg.seq_len
    for u in range(cfg.num_users):
        c = user_cluster[u]
        favorites = rng.choice(size, size=n_fav, replace=False)
        src = rng.random(T)
        inner = rng.random(T)
        pop_pick = popularity[c][rng.choice(size, size=T, p=zipf)]
        if n_fav:
            fav_pick = favorites[rng.integers(0, n_fav, size=T)]
            pop_pick = np.where(inner < cfg.favorite_share, fav_pick, pop_pick)
        long_items = c * size + pop_pick

        jumps = rng.random(T) < cfg.drift_rate
        jump_to = rng.integers(0, cfg.num_clusters, size=T)
        regime = np.empty(T, dtype=np.int64)
        current = rng.integers(0, cfg.num_clusters)
        for t in range(T):
            if jumps[t]:
                current = jump_to[t]
            regime[t] = current
        regime_items = regime * size + rng.integers(0, size, size=T)
        noise_items = rng.integers(0, cfg.vocab_size, size=T)
        noisy = rng.random(T) < cfg.noise_floor
        background = np.where(noisy, noise_items, regime_items)

        items = np.where(src < cfg.p_long, long_items, background)
        etypes = rng.integers(0, cfg.num_event_types, size=T)
        users.append(tuple(Event(u, int(i), int(e), t) for t, (i, e) in enumerate(zip(items, etypes))))
    labels = {"user_cluster": user_cluster, "item_cluster": item_cluster}
    return Dataset(tuple(users), cfg.vocab_size, metadata=f"synthetic:{cfg}", labels=labels)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    train_len: int
    test_len: int
    pretrain_len: int
    recent_len: int

    def validate(self) -> None:
        if self.pretrain_len + self.recent_len != self.train_len:
            raise InvalidConfig("train_len must equal pretrain_len + recent_len")
        if min(self.train_len, self.recent_len) < 1 or min(self.test_len, self.pretrain_len) < 0:
            raise InvalidConfig("split lengths must be positive")

    def plan(self, experts: int) -> SegmentationPlan:
        """Pretrain segment compressed into ``experts`` slots, then the recent segment."""
        if self.pretrain_len == 0:
            return build_plan([self.recent_len], [0])
        return build_plan([self.pretrain_len, self.recent_len], [experts, 0])


def split(dataset: Dataset, spec: SplitSpec):
    """Split every user's last ``train_len + test_len`` events chronologically.

    Returns ``(train, test)``: lists of per-user event tuples.
    """
    spec.validate()
    need = spec.train_len + spec.test_len
    train, test = [], []
    for u, events in enumerate(dataset.users):
        if len(events) < need:
            raise SequenceTooShort(u, need, len(events))
        tail = events[len(events) - need:]
        train.append(tuple(tail[:spec.train_len]))
        test.append(tuple(tail[spec.train_len:]))
    return train, test
