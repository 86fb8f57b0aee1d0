"""Small building blocks shared by the backbone, controller and mapper."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def xavier_uniform(gen: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return gen.uniform(-bound, bound, size=shape).astype(np.float32)


def layer_norm_affine(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return ag.layer_norm(x, eps) * gamma + beta


@dataclass
class GRUWeights:
    w_ih: Tensor  # (input, 3H), gate order r, z, n
    w_hh: Tensor  # (H, 3H)
    b_ih: Tensor
    b_hh: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "b_ih": self.b_ih, "b_hh": self.b_hh}

    @classmethod
    def init(cls, gen: np.random.Generator, input_size: int, hidden: int) -> "GRUWeights":
        bound = 1.0 / np.sqrt(hidden)

        def u(*shape):
            return ag.parameter(gen.uniform(-bound, bound, size=shape))

        return cls(u(input_size, 3 * hidden), u(hidden, 3 * hidden), u(3 * hidden), u(3 * hidden))


def gru(weights: GRUWeights, x: Tensor, mask: np.ndarray | None = None, h0: Tensor | None = None) -> Tensor:
    """Run a single-layer GRU over ``x`` (B, T, in); return the final hidden state.

    ``mask`` (B, T) marks valid steps; on masked steps the state is carried
    through unchanged, so right-padded sequences end on their last real item.
    """
    bsz, steps, _ = x.shape
    if steps == 0:
        raise ag.ContractViolation("GRU input sequence is empty")
    xw = ag.linear(x, weights.w_ih, weights.b_ih)
    h = h0 if h0 is not None else Tensor(np.zeros((bsz, weights.hidden), dtype=xw.dtype))
    return ag.gru_scan(xw, h, weights.w_hh, weights.b_hh, mask)


def gru_unrolled(weights: GRUWeights, x: Tensor, mask: np.ndarray | None = None, h0: Tensor | None = None) -> Tensor:
    """Same recurrence as :func:`gru` built from elementary ops (reference path)."""
    bsz, steps, _ = x.shape
    hid = weights.hidden
    if steps == 0:
        raise ag.ContractViolation("GRU input sequence is empty")
    xw = ag.linear(x, weights.w_ih, weights.b_ih)
    h = h0 if h0 is not None else Tensor(np.zeros((bsz, hid), dtype=xw.dtype))
    for t in range(steps):
        xt = xw[:, t]
        hw = ag.linear(h, weights.w_hh, weights.b_hh)
        rz = ag.sigmoid(xt[:, : 2 * hid] + hw[:, : 2 * hid])
        r, z = rz[:, :hid], rz[:, hid:]
        n = ag.tanh(xt[:, 2 * hid:] + r * hw[:, 2 * hid:])
        h_new = n + z * (h - n)
        if mask is None or mask[:, t].all():
            h = h_new
        else:
            m = Tensor(mask[:, t:t + 1].astype(xw.dtype))
            h = h + m * (h_new - h)
    return h


def gru_flops(input_size: int, hidden: int, steps: int) -> int:
    """Forward FLOPs of :func:`gru` for one sequence."""
    proj = 2 * input_size * 3 * hidden + 3 * hidden
    recur = 2 * hidden * 3 * hidden + 3 * hidden
    # gate adds (3H), sigmoids (2H), r*hw (H), tanh (H), interpolation (3H)
    elementwise = 10 * hidden
    return steps * (proj + recur + elementwise)


class Dropout:
    """Inverted dropout drawing its masks from ``gen``; rate 0 is the identity."""

    def __init__(self, rate: float, gen: np.random.Generator | None):
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.gen = gen

    def __call__(self, x: Tensor) -> Tensor:
        if self.rate == 0:
            return x
        keep = self.gen.random(x.shape) >= self.rate
        return x * Tensor((keep / (1 - self.rate)).astype(x.dtype))
