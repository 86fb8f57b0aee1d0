"""Structure controller: interaction sequence -> per-block execute/skip logits.

A GRU summarizes the embedded sequence and a linear head maps its final state
to ``2L`` logits, read as rows ``(beta[l, 0], beta[l, 1])`` = (execute, skip).
Training samples a hard gate with Gumbel noise and a straight-through
estimator; deployment takes the noiseless argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import GRUWeights, gru, gru_flops, xavier_uniform
from .rng import RngState, sample_gumbel


@dataclass
class ControllerWeights:
    extractor: GRUWeights
    head_w: Tensor  # (d_c, 2L)
    head_b: Tensor  # (2L,)

    @property
    def n_blocks(self) -> int:
        return self.head_w.shape[1] // 2

    def tensors(self) -> dict[str, Tensor]:
        out = {f"gru.{k}": v for k, v in self.extractor.tensors().items()}
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    @classmethod
    def init(cls, gen: np.random.Generator, d: int, n_blocks: int, d_c: int | None = None,
             execute_bias: float = 0.0) -> "ControllerWeights":
        d_c = d if d_c is None else d_c
        bias = np.zeros(2 * n_blocks, dtype=np.float32)
        bias[0::2] = execute_bias
        return cls(GRUWeights.init(gen, d, d_c),
                   ag.parameter(xavier_uniform(gen, d_c, 2 * n_blocks)),
                   ag.parameter(bias))


@dataclass
class StructureLogits:
    beta: Tensor  # (B, L, 2)

    @property
    def alpha(self) -> np.ndarray:
        b = self.beta.data.astype(np.float64)
        e = np.exp(b - b.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def n_blocks(self) -> int:
        return self.beta.shape[-2]


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 5.0
    train_stochastic: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


def extract_structure_logits(weights: ControllerWeights, seq_emb: Tensor, mask: np.ndarray | None = None) -> StructureLogits:
    """``seq_emb`` is the embedded interaction sequence, (B, T, d) or (T, d)."""
    seq_emb = ag.as_tensor(seq_emb)
    if seq_emb.ndim == 2:
        seq_emb = ag.reshape(seq_emb, (1,) + seq_emb.shape)
    if seq_emb.shape[1] == 0:
        raise ag.ContractViolation("structure controller needs a nonempty sequence")
    state = gru(weights.extractor, seq_emb, mask)
    flat = ag.linear(state, weights.head_w, weights.head_b)
    return StructureLogits(ag.reshape(flat, (flat.shape[0], weights.n_blocks, 2)))


def gumbel_relax(logits: StructureLogits, rng: RngState | None, cfg: GumbelConfig,
                 noise: np.ndarray | None = None) -> tuple[Tensor, np.ndarray, Tensor]:
    """Sample ``v' = softmax((beta + G) / tau)`` and its hard one-hot ``I``.

    Returns ``(v', I, gate)`` where ``gate = I + v' - sg(v')`` is what the
    backbone multiplies by: its value is exactly ``I``, its gradient is that
    of ``v'``. Pass ``noise`` to freeze ``G``; ``train_stochastic=False``
    drops the noise altogether.
    """
    beta = logits.beta
    if noise is None:
        noise = sample_gumbel(rng, beta.shape) if cfg.train_stochastic else np.zeros(beta.shape)
    g = Tensor(np.asarray(noise, dtype=beta.dtype))
    v = ag.softmax((beta + g) * (1.0 / cfg.tau), axis=-1)
    hard = ag.one_hot_argmax(v, axis=-1)
    return v, hard, ag.straight_through(hard, v)


def harden(logits) -> np.ndarray:
    """Deterministic gate: execute iff beta[l, 0] >= beta[l, 1] (ties execute)."""
    beta = logits.beta.data if isinstance(logits, StructureLogits) else np.asarray(ag.as_tensor(logits).data)
    execute = beta[..., 0] >= beta[..., 1]
    return np.stack([execute, ~execute], axis=-1).astype(np.float32)


def controller_flops(weights: ControllerWeights, steps: int) -> int:
    ex = weights.extractor
    return gru_flops(ex.input_size, ex.hidden, steps) + 2 * ex.hidden * 2 * weights.n_blocks + 2 * weights.n_blocks


def controller_param_count(weights: ControllerWeights) -> int:
    return sum(t.data.size for t in weights.tensors().values())
