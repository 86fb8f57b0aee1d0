"""Structural parameter mapper (hypernetwork).

An extractor GRU turns the embedded interaction sequence into a latent interest
vector ``h``; the structure logits enter as its initial hidden state through a
bias-free seed projection. ``L`` independent linear heads then map ``h`` to the
flattened weights of each block. Heads share nothing, so they can be evaluated
in any order or concurrently, and the gradient reaching head ``k`` comes only
from the examples that use block ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import BackboneConfig, block_size, flatten_block, init_block, unflatten_block
from .layers import GRUWeights, gru, gru_flops

INJECTIONS = ("initial-state", "appended-token")
HEAD_INIT_SCALE = 1e-4


@dataclass
class MapperWeights:
    extractor: GRUWeights
    seed_w: Tensor  # (2L, d_m) for initial-state injection, (2L, d) for appended-token
    head_w: list[Tensor]  # L x (d_m, P)
    head_b: list[Tensor]  # L x (P,)
    injection: str = "initial-state"
    seed_frozen: bool = field(default=False)

    @property
    def n_blocks(self) -> int:
        return len(self.head_w)

    @property
    def latent_size(self) -> int:
        return self.extractor.hidden

    def tensors(self) -> dict[str, Tensor]:
        out = {f"gru.{k}": v for k, v in self.extractor.tensors().items()}
        out["seed.w"] = self.seed_w
        for k, (w, b) in enumerate(zip(self.head_w, self.head_b)):
            out[f"head{k}.w"] = w
            out[f"head{k}.b"] = b
        return out

    def trainable(self) -> list[Tensor]:
        return [t for name, t in self.tensors().items() if not (self.seed_frozen and name == "seed.w")]

    @classmethod
    def init(cls, gen: np.random.Generator, cfg: BackboneConfig, d_m: int | None = None,
             injection: str = "initial-state", zero_seed: bool = False) -> "MapperWeights":
        if injection not in INJECTIONS:
            raise ValueError(f"injection must be one of {INJECTIONS}")
        d_m = 2 * cfg.d if d_m is None else d_m
        size = block_size(cfg)
        two_l = 2 * cfg.n_blocks
        seed_out = d_m if injection == "initial-state" else cfg.d
        seed = np.zeros((two_l, seed_out), np.float32) if zero_seed else \
            gen.normal(0, 1.0 / np.sqrt(two_l), size=(two_l, seed_out)).astype(np.float32)
        heads_w, heads_b = [], []
        for _ in range(cfg.n_blocks):
            heads_w.append(ag.parameter(gen.normal(0, HEAD_INIT_SCALE, size=(d_m, size))))
            heads_b.append(ag.parameter(flatten_block(cfg, init_block(cfg, gen))))
        return cls(GRUWeights.init(gen, cfg.d, d_m), ag.parameter(seed), heads_w, heads_b,
                   injection=injection, seed_frozen=zero_seed)


def extract_latent(weights: MapperWeights, seq_emb: Tensor, beta: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Latent interest ``h`` (B, d_m) from the embedded sequence and structure logits."""
    seq_emb = ag.as_tensor(seq_emb)
    beta = ag.as_tensor(beta)
    if seq_emb.ndim == 2:
        seq_emb = ag.reshape(seq_emb, (1,) + seq_emb.shape)
    if beta.ndim == 2:
        beta = ag.reshape(beta, (1,) + beta.shape)
    bsz, steps = seq_emb.shape[:2]
    if steps == 0:
        raise ag.ContractViolation("mapper needs a nonempty sequence")
    seed = ag.matmul(ag.reshape(beta, (bsz, -1)), weights.seed_w)
    if weights.injection == "initial-state":
        return gru(weights.extractor, seq_emb, mask, h0=seed)
    # appended-token: the projected logits become one more input step after the last real item
    token = ag.reshape(seed, (bsz, 1, seed.shape[-1]))
    if mask is None:
        return gru(weights.extractor, ag.concat([seq_emb, token], axis=1))
    lengths = mask.sum(axis=1).astype(int)
    padded = ag.concat([seq_emb, Tensor(np.zeros((bsz, 1, seq_emb.shape[-1]), np.float32))], axis=1)
    place = np.zeros((bsz, steps + 1, 1), np.float32)
    place[np.arange(bsz), lengths, 0] = 1
    x = padded + Tensor(place) * token
    new_mask = np.concatenate([mask, np.zeros((bsz, 1), mask.dtype)], axis=1)
    new_mask[np.arange(bsz), lengths] = 1
    return gru(weights.extractor, x, new_mask)


def generate_weights(weights: MapperWeights, h: Tensor, blocks=None, order=None) -> list[Tensor | None]:
    """Flat per-block weight vectors ``W_k = h @ H_k + b_k``, each (B, P).

    ``blocks`` (iterable of indices or a length-L bitmap) restricts which heads
    run; the rest come back as None. ``order`` only changes evaluation order.
    """
    h = ag.as_tensor(h)
    if not np.all(np.isfinite(h.data)):
        raise ag.NumericFault("latent interest is not finite")
    if h.ndim == 1:
        h = ag.reshape(h, (1, h.shape[0]))
    n = weights.n_blocks
    if blocks is None:
        wanted = list(range(n))
    else:
        arr = np.asarray(blocks)
        wanted = list(np.flatnonzero(arr)) if arr.dtype == bool and arr.size == n else [int(i) for i in arr]
    out: list[Tensor | None] = [None] * n
    for k in (order if order is not None else wanted):
        if k in wanted:
            out[k] = ag.linear(h, weights.head_w[k], weights.head_b[k])
    return out


def as_block_weights(cfg: BackboneConfig, flat: list[Tensor | None]) -> list[dict[str, Tensor] | None]:
    return [None if f is None else unflatten_block(cfg, f) for f in flat]


def mapper_flops(weights: MapperWeights, steps: int, n_heads: int | None = None) -> int:
    """FLOPs of one extractor pass plus ``n_heads`` weight-generation heads."""
    ex = weights.extractor
    n_heads = weights.n_blocks if n_heads is None else n_heads
    two_l, seed_out = weights.seed_w.shape
    size = weights.head_w[0].shape[1]
    extra = 1 if weights.injection == "appended-token" else 0
    seed = 2 * two_l * seed_out
    heads = n_heads * (2 * ex.hidden * size + size)
    return gru_flops(ex.input_size, ex.hidden, steps + extra) + seed + heads


def extractor_flops(weights: MapperWeights, steps: int) -> int:
    return mapper_flops(weights, steps, n_heads=0)


def heads_flops(weights: MapperWeights, n_heads: int) -> int:
    """FLOPs of ``n_heads`` weight-generation heads (the cloud's share of assembly)."""
    size = weights.head_w[0].shape[1]
    return n_heads * (2 * weights.extractor.hidden * size + size)
