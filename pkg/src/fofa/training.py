"""Joint training of controller, mapper and shared components.

The objective is next-item cross-entropy plus ``lam`` times the compactness
term ``sum_k -log alpha_{k,1}``. With ``conditioning="prefix"`` each training
sequence is cut at a random point: the structure controller and the mapper see
only the prefix, and the loss covers the positions whose targets lie after the
cut, which is how a device uses a model assembled from its history.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .controller import GumbelConfig, StructureLogits
from .data import SplitDataset, pad_right, window
from .model import MODES, ForwardOFA, ModelConfig
from .rng import RngState

log = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-12
CONDITIONING = ("prefix", "full")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 3e-3
    tau: float = 5.0
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    mode: str = "forward-ofa"
    seed: int = 0
    clip_norm: float = 5.0
    dropout: float = 0.3
    conditioning: str = "prefix"
    min_context: int = 5
    sampled_softmax: int = 0  # 0 = full catalog
    snapshot_dir: str | None = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"conditioning must be one of {CONDITIONING}")
        for name in ("lr", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossReport:
    rec: float
    compact: float
    total: float
    lam: float
    executed: float  # mean executed blocks in the batch
    clamped: bool = False
    step: int = 0
    grad_norm: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def rec_loss(scores: Tensor, targets, weights=None) -> Tensor:
    """Mean next-item negative log-likelihood over the scored catalog."""
    return ag.cross_entropy(scores, np.asarray(targets), weights)


def compact_loss(logits: StructureLogits | Tensor) -> tuple[Tensor, bool]:
    """``sum_k -log alpha_{k,1}``, averaged over the batch, and whether the floor clamped.

    ``alpha_{k,1}`` below 1e-12 is clamped before the log (zero gradient there).
    """
    beta = logits.beta if isinstance(logits, StructureLogits) else ag.as_tensor(logits)
    if beta.ndim == 2:
        beta = ag.reshape(beta, (1,) + beta.shape)
    logp = ag.log_softmax(beta, axis=-1)
    skip = logp[:, :, 1]
    floor = math.log(ALPHA_FLOOR)
    clamped = bool(np.any(skip.data < floor))
    per_example = ag.reduce_sum(ag.neg(ag.clamp_min(skip, floor)), axis=1)
    return ag.reduce_mean(per_example), clamped


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction and global-norm clipping. Each step rebinds ``Tensor.data``."""

    def __init__(self, params: dict[str, Tensor], lr: float, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = 5.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.clip_norm = lr, b1, b2, eps, clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if not math.isfinite(norm):
            raise ag.NumericFault("gradient norm is not finite")
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        step_size = self.lr / (1 - self.b1 ** self.t)
        c2 = 1 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads[name] * scale if scale != 1.0 else grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            new = p.data - (step_size * m / denom).astype(p.data.dtype)
            new.flags.writeable = False
            p.data = new
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.asarray([self.t], dtype=np.float32)}
        out.update({f"adam.m.{k}": v for k, v in self.m.items()})
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=np.float32)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=np.float32)


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    users: np.ndarray
    inputs: np.ndarray  # (B, T)
    mask: np.ndarray
    targets: np.ndarray  # (B, T)
    weights: np.ndarray  # (B, T) loss positions
    ctx: np.ndarray | None = None  # (B, Tc) conditioning prefix
    ctx_mask: np.ndarray | None = None


def make_batch(data: SplitDataset, users: np.ndarray, max_len: int, conditioning: str | None,
               min_context: int, gen: np.random.Generator) -> Batch:
    """Left-truncate to the most recent ``max_len + 1`` items, shift for next-item targets, right-pad."""
    seqs = [window(data.train[u], max_len + 1) for u in users]
    if any(len(s) < 2 for s in seqs):
        raise ag.ContractViolation("training sequences need at least two items")
    inputs, mask = pad_right([s[:-1] for s in seqs], max_len)
    targets, _ = pad_right([s[1:] for s in seqs], max_len)
    weights = mask.astype(np.float64)
    ctx = ctx_mask = None
    if conditioning == "prefix":
        lengths = mask.sum(axis=1)
        lo = np.minimum(min_context, lengths)
        cuts = gen.integers(lo, lengths + 1)
        pos = np.arange(max_len)[None, :]
        weights = weights * (pos >= cuts[:, None] - 1)
        width = int(cuts.max())
        ctx = inputs[:, :width].copy()
        ctx_mask = pos[:, :width] < cuts[:, None]
        ctx[~ctx_mask] = 0
    return Batch(np.asarray(users), inputs, mask, targets, weights, ctx, ctx_mask)


def epoch_batches(data: SplitDataset, cfg: TrainConfig, max_len: int, rng: RngState, uses_context: bool):
    gen = rng.generator()
    order = gen.permutation(data.n_users)
    cond = cfg.conditioning if uses_context else None
    for start in range(0, len(order), cfg.batch_size):
        yield make_batch(data, order[start:start + cfg.batch_size], max_len, cond, cfg.min_context, gen)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    model: ForwardOFA
    optimizer: Adam
    rng: RngState
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)


def init_state(model_cfg: ModelConfig, cfg: TrainConfig) -> TrainState:
    if model_cfg.mode != cfg.mode:
        model_cfg = replace(model_cfg, mode=cfg.mode)
    model = ForwardOFA.init(model_cfg, cfg.seed)
    opt = Adam(model.trainable(), cfg.lr, clip_norm=cfg.clip_norm)
    return TrainState(model, opt, RngState(cfg.seed, 0))


def _scored_positions(model: ForwardOFA, rep: Tensor, batch: Batch, cfg: TrainConfig, gen) -> tuple[Tensor, np.ndarray]:
    """Scores only where the loss applies, over the catalog or a shared sampled candidate set."""
    bsz, t, d = rep.shape
    flat = np.flatnonzero(batch.weights.ravel() > 0)
    rows = ag.reshape(rep, (bsz * t, d))[flat]
    targets = batch.targets.ravel()[flat]
    if cfg.sampled_softmax:
        n = model.cfg.backbone.n_items
        extra = gen.choice(n, size=min(cfg.sampled_softmax, n), replace=False)
        cand, inverse = np.unique(np.concatenate([targets, extra]), return_inverse=True)
        return model.shared.score(rows, cand), inverse[:len(targets)]
    return model.shared.score(rows), targets


def compute_loss(model: ForwardOFA, batch: Batch, cfg: TrainConfig, rng: RngState | None, train: bool = True):
    """Forward pass and loss; returns (total tensor, rec tensor, compact tensor or None, ForwardResult, clamped)."""
    gumbel = GumbelConfig(cfg.tau)
    res = model.forward(batch.inputs, batch.mask, batch.ctx, batch.ctx_mask, train=train, rng=rng, gumbel=gumbel,
                        dropout=cfg.dropout if train else 0.0)
    gen = rng.generator() if (rng is not None and cfg.sampled_softmax) else np.random.default_rng(0)
    scores, targets = _scored_positions(model, res.rep, batch, cfg, gen)
    rec = rec_loss(scores, targets)
    compact, clamped = None, False
    total = rec
    if res.logits is not None and cfg.lam > 0:
        compact, clamped = compact_loss(res.logits)
        total = rec + compact * cfg.lam
    return total, rec, compact, res, clamped


def train_step(batch: Batch, state: TrainState, cfg: TrainConfig) -> tuple[TrainState, LossReport]:
    model = state.model
    params = state.optimizer.params
    try:
        with ag.Tape():
            total, rec, compact, res, clamped = compute_loss(model, batch, cfg, state.rng)
            grads = ag.backward(total, list(params.values()))
        named = {name: grads[p] for name, p in params.items()}
        norm = state.optimizer.step(named)
    except ag.NumericFault as e:
        snap = diagnostic_snapshot(state, batch, str(e))
        if cfg.snapshot_dir:
            path = Path(cfg.snapshot_dir) / f"abort-step{state.step}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(snap, indent=2, sort_keys=True))
        raise TrainingAborted(f"non-finite value at step {state.step}: {e}", snap) from e
    rec_v = float(rec.data)
    # without a controller the compactness term does not exist; with lam = 0 it is reported but not optimized
    if compact is None and res.logits is not None:
        compact_v = float(compact_loss(res.logits)[0].data)
    else:
        compact_v = 0.0 if compact is None else float(compact.data)
    executed = float(res.kept(model.cfg.backbone.n_blocks).sum(axis=1).mean())
    report = LossReport(rec_v, compact_v, rec_v + cfg.lam * compact_v, cfg.lam, executed, clamped,
                        state.step, norm)
    state.step += 1
    state.history.append(report)
    return state, report


def diagnostic_snapshot(state: TrainState, batch: Batch, reason: str) -> dict:
    norms = {}
    for name, p in state.model.named_tensors().items():
        arr = p.data.astype(np.float64)
        norms[name] = {"finite": bool(np.isfinite(arr).all()), "max_abs": float(np.nanmax(np.abs(arr)))}
    return {"reason": reason, "step": state.step, "epoch": state.epoch, "users": batch.users.tolist(),
            "recent": [r.to_dict() for r in state.history[-5:]], "tensors": norms}


def fit(data: SplitDataset, model_cfg: ModelConfig, cfg: TrainConfig, state: TrainState | None = None,
        on_epoch=None) -> TrainState:
    """Run ``cfg.epochs`` epochs of seeded, shuffled mini-batch training."""
    if model_cfg.backbone.n_items != data.n_items:
        model_cfg = replace(model_cfg, backbone=replace(model_cfg.backbone, n_items=data.n_items))
    state = state or init_state(model_cfg, cfg)
    model = state.model
    uses_context = model.cfg.uses_controller or model.cfg.uses_mapper
    max_len = model.cfg.backbone.max_seq_len
    while state.epoch < cfg.epochs:
        reports = []
        for batch in epoch_batches(data, cfg, max_len, state.rng, uses_context):
            state, rep = train_step(batch, state, cfg)
            reports.append(rep)
        state.epoch += 1
        summary = epoch_summary(reports, state.epoch)
        log.info("epoch %d rec %.4f compact %.4f blocks %.2f", state.epoch, summary["rec"],
                 summary["compact"], summary["executed"])
        if on_epoch is not None:
            on_epoch(state, summary)
    return state


def epoch_summary(reports: list[LossReport], epoch: int) -> dict:
    keys = ("rec", "compact", "total", "executed")
    out = {k: float(np.mean([getattr(r, k) for r in reports])) if reports else 0.0 for k in keys}
    out["epoch"] = epoch
    out["lam"] = reports[0].lam if reports else 0.0
    out["clamped"] = any(r.clamped for r in reports)
    return out


def lambda_sweep(data: SplitDataset, grid, model_cfg: ModelConfig, cfg: TrainConfig, seeds=(0,),
                 test: SplitDataset | None = None) -> list[dict]:
    """One row per (lam, seed): independent training runs evaluated on the held-out items."""
    from .metrics import evaluate

    grid = list(grid)
    if grid != sorted(grid):
        raise ValueError("lambda grid must be sorted ascending")
    rows = []
    for lam in grid:
        for seed in seeds:
            run = replace(cfg, lam=float(lam), seed=int(seed))
            state = fit(data, model_cfg, run)
            res = evaluate(state.model, test or data)
            rows.append({"lam": float(lam), "seed": int(seed), "ndcg": res.ndcg, "hit": res.hit,
                         "mean_flops": res.mean_flops, "mean_params": res.mean_params,
                         "mean_blocks": res.mean_blocks})
    return rows
