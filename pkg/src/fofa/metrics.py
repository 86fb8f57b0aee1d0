"""Ranking metrics and leave-one-out evaluation with gate ablations."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .backbone import block_param_count, flops_count, shared_param_count
from .controller import harden
from .data import SplitDataset, pad_right
from .model import ForwardOFA

GATE_POLICIES = ("learned", "all-execute", "random-block", "first-k", "last-k")


def rank_of_target(scores: np.ndarray, target: int, candidates: np.ndarray | None = None) -> int:
    """1-based rank of ``target``; ties go to the lower item id."""
    scores = np.asarray(scores)
    ids = np.arange(scores.shape[-1]) if candidates is None else np.asarray(candidates)
    pos = np.flatnonzero(ids == target)
    if pos.size == 0:
        raise ValueError(f"target {target} is not among the candidates")
    s = scores[pos[0]]
    return int(1 + np.count_nonzero(scores > s) + np.count_nonzero((scores == s) & (ids < target)))


def ranks_full(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized full-catalog ranks for (N, n) scores."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    s = scores[np.arange(len(targets)), targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    better = (scores > s) | ((scores == s) & (ids < targets[:, None]))
    return 1 + better.sum(axis=1)


def rank_metrics(ranks, k: int = 10) -> tuple[float, float]:
    """(NDCG@k, Hit@k) for one relevant item per case, given 1-based ranks."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return 0.0, 0.0
    if np.any(ranks < 1):
        raise ValueError("ranks are 1-based")
    hit = ranks <= k
    ndcg = np.where(hit, 1.0 / np.log2(ranks + 1), 0.0)
    return float(ndcg.mean()), float(hit.mean())


@dataclass
class MetricSums:
    """Associative partial sums so per-worker results merge exactly."""

    ndcg: float = 0.0
    hit: float = 0.0
    count: int = 0

    def add(self, ranks, k: int = 10) -> "MetricSums":
        ranks = np.asarray(ranks, dtype=np.float64)
        hit = ranks <= k
        self.ndcg += float(np.where(hit, 1.0 / np.log2(ranks + 1), 0.0).sum())
        self.hit += float(hit.sum())
        self.count += int(ranks.size)
        return self

    def merge(self, other: "MetricSums") -> "MetricSums":
        return MetricSums(self.ndcg + other.ndcg, self.hit + other.hit, self.count + other.count)

    def result(self) -> tuple[float, float]:
        if not self.count:
            return 0.0, 0.0
        return self.ndcg / self.count, self.hit / self.count


@dataclass
class EvalResult:
    policy: str
    ndcg: float
    hit: float
    mean_flops: float
    mean_params: float
    mean_blocks: float
    users: int
    ranks: np.ndarray = field(repr=False, default=None)
    kept: np.ndarray = field(repr=False, default=None)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("ranks")
        d.pop("kept")
        return d


def ablation_gate(policy: str, learned: np.ndarray, gen: np.random.Generator | None = None) -> np.ndarray:
    """(B, L, 2) hard gates for an evaluation policy.

    ``random-block``, ``first-k`` and ``last-k`` keep as many blocks per example
    as the learned gate does, chosen at random / from the bottom / from the top.
    """
    learned = np.asarray(learned, dtype=np.float32)
    bsz, n_blocks = learned.shape[:2]
    k = (learned[..., 0] == 1).sum(axis=1)
    keep = np.zeros((bsz, n_blocks), dtype=bool)
    if policy == "learned":
        return learned
    if policy == "all-execute":
        keep[:] = True
    elif policy == "first-k":
        keep = np.arange(n_blocks)[None, :] < k[:, None]
    elif policy == "last-k":
        keep = np.arange(n_blocks)[None, :] >= (n_blocks - k)[:, None]
    elif policy == "random-block":
        if gen is None:
            raise ValueError("random-block needs a generator")
        for b in range(bsz):
            keep[b, gen.choice(n_blocks, size=int(k[b]), replace=False)] = True
    else:
        raise ValueError(f"unknown gate policy {policy!r}")
    return np.stack([keep, ~keep], axis=-1).astype(np.float32)


def _sample_candidates(gen: np.random.Generator, n_items: int, target: int, n_neg: int) -> np.ndarray:
    pool = gen.choice(n_items - 1, size=min(n_neg, n_items - 1), replace=False)
    pool = pool + (pool >= target)
    return np.concatenate([[target], pool])


def evaluate(model: ForwardOFA, data: SplitDataset, policy: str = "learned", *, k: int = 10,
             batch_size: int = 256, seed: int = 0, sampled_negatives: int | None = None,
             users=None) -> EvalResult:
    """Leave-one-out evaluation: the training sequence predicts the held-out item.

    Ranking is over the full catalog unless ``sampled_negatives`` is set. The
    assembled (deploy) path is used, so skipped blocks never run.
    """
    bb = model.cfg.backbone
    gen = np.random.default_rng(np.random.SeedSequence([seed, 0xE7A1]))
    users = np.arange(data.n_users) if users is None else np.asarray(users)
    if policy != "learned" and policy != "all-execute" and not model.cfg.uses_controller:
        raise ValueError(f"policy {policy!r} needs a structure controller")
    all_ranks, all_kept = [], []
    with ag.no_grad():
        for start in range(0, len(users), batch_size):
            chunk = users[start:start + batch_size]
            seqs = [data.train[u] for u in chunk]
            inputs, mask = pad_right(seqs, bb.max_seq_len)
            lengths = mask.sum(axis=1)
            override = None
            if model.cfg.uses_controller and policy != "learned":
                learned = harden(model.structure(inputs, mask))
                override = ablation_gate(policy, learned, gen)
            res = model.forward(inputs, mask, deploy=True, gate_override=override)
            last = res.rep.data[np.arange(len(chunk)), lengths - 1]
            targets = data.test[chunk]
            kept = res.kept(bb.n_blocks)
            all_kept.append(kept)
            table = model.shared.item_emb.data
            if sampled_negatives:
                for i, tgt in enumerate(targets):
                    cand = _sample_candidates(gen, data.n_items, int(tgt), sampled_negatives)
                    all_ranks.append([rank_of_target(table[cand] @ last[i], int(tgt), cand)])
            else:
                all_ranks.append(ranks_full(last @ table.T, targets))
    ranks = np.concatenate([np.asarray(r).ravel() for r in all_ranks])
    kept = np.concatenate(all_kept)
    ndcg, hit = rank_metrics(ranks, k)
    n_cand = None if not sampled_negatives else sampled_negatives + 1
    flops = np.array([flops_count(bb, row, n_candidates=n_cand) for row in kept])
    params = kept.sum(axis=1) * block_param_count(bb).per_block + shared_param_count(bb)
    return EvalResult(policy, ndcg, hit, float(flops.mean()), float(params.mean()),
                      float(kept.sum(axis=1).mean()), len(users), ranks, kept)


def block_usage(kept: np.ndarray) -> np.ndarray:
    """Number of examples that execute each block."""
    return np.asarray(kept, dtype=bool).sum(axis=0)


def block_count_distribution(kept: np.ndarray) -> np.ndarray:
    """Histogram of executed-block counts, bins 0..L."""
    kept = np.asarray(kept, dtype=bool)
    return np.bincount(kept.sum(axis=1), minlength=kept.shape[1] + 1)
