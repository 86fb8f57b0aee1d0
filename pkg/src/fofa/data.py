"""Event logs: ingestion, leave-one-out preprocessing and synthetic generation."""

from __future__ import annotations

import logging
import os
import re
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MALFORMED_LIMIT = 0.01


class IngestError(RuntimeError):
    pass


class EmptyDatasetError(RuntimeError):
    pass


@dataclass
class EventLog:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    malformed: int = 0
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.users)

    def report(self) -> dict:
        return {"records": len(self), "malformed": self.malformed,
                "users": int(np.unique(self.users).size), "items": int(np.unique(self.items).size)}

    @classmethod
    def from_records(cls, records, **kw) -> "EventLog":
        arr = np.asarray(records, dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2], arr[:, 3].astype(np.int64), **kw)


# ---------------------------------------------------------------------------
# ingestion

_SPLIT = {"double-colon": re.compile(r"::"), "delimited": re.compile(r"[\t,]")}


def _detect_format(first_line: str) -> str:
    return "double-colon" if "::" in first_line else "delimited"


def ingest(path: str | os.PathLike, fmt: str = "auto", columns=("user", "item", "rating", "timestamp")) -> EventLog:
    """Parse a raw interaction file.

    ``double-colon`` is the MovieLens ``user::item::rating::timestamp`` layout;
    ``delimited`` accepts tab- or comma-separated fields in ``columns`` order.
    Non-integer ids are mapped to integers in order of first appearance
    (the mapping is kept in ``extra['vocab']``). A leading header line is
    skipped; other unparseable lines are counted, and more than 1% of them is
    a hard failure.
    """
    try:
        with open(path, "r", encoding="utf-8", errors="replace") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise IngestError(f"cannot read {path}: {e}") from e
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        return EventLog(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64))
    if fmt == "auto":
        fmt = _detect_format(lines[0])
    if fmt not in _SPLIT:
        raise ValueError(f"unknown format {fmt!r}")
    order = [columns.index(c) for c in ("user", "item", "rating", "timestamp")]
    splitter = _SPLIT[fmt]
    vocab: dict[str, dict[str, int]] = {"user": {}, "item": {}}

    def as_id(kind: str, tok: str) -> int:
        tok = tok.strip()
        if tok.lstrip("-").isdigit():
            return int(tok)
        table = vocab[kind]
        return table.setdefault(tok, len(table))

    if not any(ch.isdigit() for ch in lines[0]):
        lines = lines[1:]  # header
    records, malformed = [], 0
    for line in lines:
        parts = splitter.split(line.strip())
        try:
            if len(parts) != 4:
                raise ValueError("expected 4 fields")
            fields = [parts[i] for i in order]
            rating, stamp = float(fields[2]), int(float(fields[3]))
            rec = (as_id("user", fields[0]), as_id("item", fields[1]), rating, stamp)
        except ValueError:
            malformed += 1
            continue
        records.append(rec)
    total = len(records) + malformed
    if total and malformed / total > MALFORMED_LIMIT:
        raise IngestError(f"{malformed} of {total} lines malformed in {path}")
    if malformed:
        log.warning("%s: skipped %d malformed lines", path, malformed)
    if not records:
        return EventLog(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64),
                        malformed=malformed)
    users, items, ratings, stamps = zip(*records)
    extra = {"vocab": vocab} if vocab["user"] or vocab["item"] else {}
    return EventLog(np.asarray(users, np.int64), np.asarray(items, np.int64), np.asarray(ratings, np.float64),
                    np.asarray(stamps, np.int64), malformed=malformed, extra=extra)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class SplitDataset:
    train: list[np.ndarray]  # per user, dense item ids in time order (all but last)
    test: np.ndarray  # per user, the last item
    n_items: int
    user_ids: np.ndarray  # original id of each retained user
    item_ids: np.ndarray  # original id of each dense item index
    extra: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.train)

    @property
    def n_interactions(self) -> int:
        return int(sum(len(s) for s in self.train) + len(self.test))

    def stats(self) -> dict:
        return {"users": self.n_users, "items": self.n_items, "interactions": self.n_interactions}

    def full_sequence(self, u: int) -> np.ndarray:
        return np.append(self.train[u], self.test[u])

    def to_event_log(self) -> EventLog:
        users, items, stamps = [], [], []
        for u in range(self.n_users):
            seq = self.full_sequence(u)
            users.append(np.full(len(seq), self.user_ids[u]))
            items.append(self.item_ids[seq])
            stamps.append(np.arange(len(seq)))
        users, items, stamps = (np.concatenate(x) for x in (users, items, stamps))
        return EventLog(users.astype(np.int64), items.astype(np.int64), np.ones(len(users)), stamps.astype(np.int64))

    def subset(self, users) -> "SplitDataset":
        users = np.asarray(users)
        return SplitDataset([self.train[u] for u in users], self.test[users], self.n_items,
                            self.user_ids[users], self.item_ids, dict(self.extra))


def filter_min_interactions(users: np.ndarray, items: np.ndarray, min_count: int,
                            min_item_count: int | None = None) -> np.ndarray:
    """Boolean keep-mask after iteratively dropping sparse users and items until nothing changes."""
    min_item_count = min_count if min_item_count is None else min_item_count
    keep = np.ones(len(users), dtype=bool)
    while True:
        _, uinv, ucount = np.unique(users[keep], return_inverse=True, return_counts=True)
        _, iinv, icount = np.unique(items[keep], return_inverse=True, return_counts=True)
        ok = (ucount[uinv] >= min_count) & (icount[iinv] >= min_item_count)
        if ok.all():
            return keep
        idx = np.flatnonzero(keep)
        keep[idx[~ok]] = False


def preprocess(log_: EventLog, min_interactions: int = 20, min_item_interactions: int | None = None) -> SplitDataset:
    """Positive-rating filter, iterative >= ``min_interactions`` filter, time order, leave-one-out.

    ``min_item_interactions`` overrides the item-side threshold (defaults to the
    user-side one).
    """
    if len(log_) == 0:
        raise EmptyDatasetError("event log is empty")
    pos = log_.ratings > 0
    users, items, stamps = log_.users[pos], log_.items[pos], log_.timestamps[pos]
    keep = filter_min_interactions(users, items, min_interactions, min_item_interactions)
    users, items, stamps = users[keep], items[keep], stamps[keep]
    if len(users) == 0:
        raise EmptyDatasetError(f"no user and item survive the {min_interactions}-interaction filter")
    item_ids, dense_items = np.unique(items, return_inverse=True)
    user_ids, dense_users = np.unique(users, return_inverse=True)
    # stable sort keeps file order among equal timestamps
    order = np.lexsort((stamps, dense_users))
    dense_users, dense_items = dense_users[order], dense_items[order]
    bounds = np.flatnonzero(np.diff(dense_users)) + 1
    seqs = np.split(dense_items, bounds)
    train = [s[:-1].astype(np.int64) for s in seqs]
    test = np.asarray([s[-1] for s in seqs], dtype=np.int64)
    extra = {k: v for k, v in log_.extra.items() if k != "vocab"}
    return SplitDataset(train, test, len(item_ids), user_ids, item_ids, extra)


# ---------------------------------------------------------------------------
# synthetic multi-interest data


@dataclass(frozen=True)
class SyntheticSpec:
    """Users whose sequences follow cluster- and style-specific dynamics.

    Items are split into ``n_clusters`` disjoint ranges and carry a hidden
    unit vector in a ``latent_dim`` space. Every regime of a user pairs a
    cluster with one of ``n_styles`` hidden linear dynamics ``M_s``: with
    probability ``coherence`` the next item is drawn from the cluster with
    probability proportional to ``exp(sharpness * z_j . M_s z_prev) * pop_j ** pop_weight``, otherwise
    from the cluster's Zipf popularity. A user starts in a random regime and
    switches with probability ``switch_prob``; each switch is followed by
    another with the same probability, up to ``max_switches``.
    """

    n_clusters: int = 4
    items_per_cluster: int = 500
    n_users: int = 400
    seq_len: int = 50
    switch_prob: float = 0.05
    seed: int = 0
    n_styles: int = 4
    latent_dim: int = 8
    sharpness: float = 20.0
    coherence: float = 0.8
    zipf: float = 1.1
    pop_weight: float = 1.0
    max_switches: int = 3
    min_dwell: int = 8

    def to_dict(self) -> dict:
        return asdict(self)


def _regime_path(gen: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    """Per-position regime index ``cluster * n_styles + style``."""
    n_regimes = spec.n_clusters * spec.n_styles
    path = np.empty(spec.seq_len, dtype=np.int64)
    n_switch = 0
    while n_switch < spec.max_switches and gen.random() < spec.switch_prob:
        n_switch += 1
    # switch points spaced at least min_dwell apart, away from both ends
    candidates = np.arange(spec.min_dwell, spec.seq_len - spec.min_dwell + 1)
    points: list[int] = []
    for _ in range(n_switch):
        free = [p for p in candidates if all(abs(p - q) >= spec.min_dwell for q in points)]
        if not free:
            break
        points.append(int(gen.choice(free)))
    points.sort()
    current = int(gen.integers(n_regimes))
    start = 0
    for p in points + [spec.seq_len]:
        path[start:p] = current
        if p < spec.seq_len and spec.n_clusters > 1:
            # a switch always changes the interest cluster
            cluster = (current // spec.n_styles + gen.integers(1, spec.n_clusters)) % spec.n_clusters
            current = int(cluster * spec.n_styles + gen.integers(spec.n_styles))
        start = p
    return path


def _random_rotation(gen: np.random.Generator, k: int) -> np.ndarray:
    q, r = np.linalg.qr(gen.normal(size=(k, k)))
    return q * np.sign(np.diag(r))


def synthesize(spec: SyntheticSpec) -> EventLog:
    """Generate a seeded event log; ground-truth clusters, styles and switches go to ``extra``."""
    if spec.seq_len < 20:
        raise ValueError("seq_len must be >= 20 so every user passes the interaction filter")
    gen = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EED]))
    m, k = spec.items_per_cluster, spec.latent_dim
    ranks = np.arange(1, m + 1, dtype=np.float64)
    pop = ranks ** -spec.zipf
    pop /= pop.sum()
    pop_order = [gen.permutation(m) for _ in range(spec.n_clusters)]
    latent = gen.normal(size=(spec.n_clusters, m, k))
    latent /= np.linalg.norm(latent, axis=-1, keepdims=True)
    dynamics = np.stack([_random_rotation(gen, k) for _ in range(spec.n_styles)])
    log_pop = np.empty((spec.n_clusters, m))
    for c in range(spec.n_clusters):
        log_pop[c, pop_order[c]] = np.log(pop)

    users, items, paths, switches = [], [], [], []
    for u in range(spec.n_users):
        path = _regime_path(gen, spec)
        clusters, styles = path // spec.n_styles, path % spec.n_styles
        seq = np.empty(spec.seq_len, dtype=np.int64)
        for t in range(spec.seq_len):
            c, s = clusters[t], styles[t]
            if t > 0 and clusters[t - 1] == c and gen.random() < spec.coherence:
                prev = latent[c, seq[t - 1] - c * m]
                logits = spec.sharpness * latent[c] @ (dynamics[s] @ prev) + spec.pop_weight * log_pop[c]
                p = np.exp(logits - logits.max())
                local = gen.choice(m, p=p / p.sum())
            else:
                local = pop_order[c][gen.choice(m, p=pop)]
            seq[t] = c * m + local
        users.append(np.full(spec.seq_len, u))
        items.append(seq)
        paths.append(path)
        switches.append(np.flatnonzero(np.diff(path)) + 1)
    n = spec.n_users * spec.seq_len
    path = np.concatenate(paths)
    stamps = np.tile(np.arange(spec.seq_len), spec.n_users) + 1_000_000
    return EventLog(np.concatenate(users).astype(np.int64), np.concatenate(items), np.ones(n),
                    stamps.astype(np.int64),
                    extra={"cluster": path // spec.n_styles, "style": path % spec.n_styles,
                           "switch_points": switches, "spec": spec.to_dict()})


def cluster_purity(log_: EventLog) -> float:
    """Mean over users of the share of items from the user's majority cluster."""
    clusters = log_.extra["cluster"]
    shares = []
    for u in np.unique(log_.users):
        c = clusters[log_.users == u]
        shares.append(np.bincount(c).max() / len(c))
    return float(np.mean(shares))


# ---------------------------------------------------------------------------
# training windows


def window(seq: np.ndarray, length: int) -> np.ndarray:
    """Keep the most recent ``length`` items."""
    return np.asarray(seq)[-length:]


def pad_right(seqs, length: int) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros((len(seqs), length), dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        s = window(s, length)
        out[i, :len(s)] = s
        mask[i, :len(s)] = True
    return out, mask
