"""Stacked-block sequential recommenders with per-block execute/skip gating.

Two families are supported:

* ``attention``: pre-norm transformer blocks with causal multi-head attention
  and a ReLU feed-forward layer (SASRec style).
* ``causal-conv``: residual blocks of two dilated causal convolutions
  (NextItNet style).

Block ``l`` maps ``h`` to ``F_l(h)`` (its internal residual included). Gating
follows ``h_{l+1} = F_l(h_l) * I[l, 0] + h_l * I[l, 1]``: column 0 executes the
block, column 1 passes the input through untouched.

Block weights are plain ``dict[str, Tensor]``. Shared weights carry their
natural shapes; generated (per-example) weights carry a leading batch axis, with
vectors stored as (B, 1, n) so that they broadcast over positions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import layer_norm_affine, xavier_uniform

FAMILIES = ("attention", "causal-conv")

LN_FLOPS = 7  # per element: mean, center, square-accumulate (2), normalize, scale, shift
SOFTMAX_FLOPS = 3  # per element: exp, accumulate, divide
ACT_FLOPS = 1  # relu / sigmoid / tanh, per element


class GateError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    family: str = "attention"
    n_blocks: int = 6
    d: int = 32
    n_items: int = 2000
    max_seq_len: int = 50
    heads: int = 2
    ffn_mult: int = 4
    kernel: int = 3
    dilations: tuple = field(default=())
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.family == "attention" and self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.family == "causal-conv":
            if not self.dilations:
                # NextItNet pattern: block dilation r in 1,2,4,8,...; second conv doubles it
                cycle = (1, 2, 4, 8)
                dil = tuple((cycle[i % 4], 2 * cycle[i % 4]) for i in range(self.n_blocks))
                object.__setattr__(self, "dilations", dil)
            dil = tuple(tuple(int(v) for v in pair) for pair in self.dilations)
            object.__setattr__(self, "dilations", dil)
            if len(dil) != self.n_blocks or any(len(p) != 2 or min(p) < 1 for p in dil):
                raise ValueError(f"need {self.n_blocks} positive (d1, d2) dilation pairs, got {dil}")

    @property
    def ffn(self) -> int:
        return self.ffn_mult * self.d

    def to_dict(self) -> dict:
        out = asdict(self)
        out["dilations"] = [list(p) for p in self.dilations]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["dilations"] = tuple(tuple(p) for p in d.get("dilations", ()))
        return cls(**d)


def attention_config(**kw) -> BackboneConfig:
    kw.setdefault("n_blocks", 6)
    return BackboneConfig(family="attention", **kw)


def conv_config(**kw) -> BackboneConfig:
    kw.setdefault("n_blocks", 12)
    return BackboneConfig(family="causal-conv", **kw)


# ---------------------------------------------------------------------------
# weight layout


def block_layout(cfg: BackboneConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; flat vectors concatenate tensors in this order, each row-major."""
    d = cfg.d
    if cfg.family == "attention":
        f = cfg.ffn
        return [
            ("ln1.gamma", (d,)), ("ln1.beta", (d,)),
            ("wq", (d, d)), ("bq", (d,)),
            ("wk", (d, d)), ("bk", (d,)),
            ("wv", (d, d)), ("bv", (d,)),
            ("wo", (d, d)), ("bo", (d,)),
            ("ln2.gamma", (d,)), ("ln2.beta", (d,)),
            ("w1", (d, f)), ("b1", (f,)),
            ("w2", (f, d)), ("b2", (d,)),
        ]
    k = cfg.kernel
    return [
        ("ln1.gamma", (d,)), ("ln1.beta", (d,)),
        ("conv1.w", (k, d, d)), ("conv1.b", (d,)),
        ("ln2.gamma", (d,)), ("ln2.beta", (d,)),
        ("conv2.w", (k, d, d)), ("conv2.b", (d,)),
    ]


def block_size(cfg: BackboneConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in block_layout(cfg))


def init_block(cfg: BackboneConfig, gen: np.random.Generator) -> dict[str, np.ndarray]:
    """Conventional initialization: Xavier matrices, zero biases, unit norms."""
    out = {}
    for name, shape in block_layout(cfg):
        if name.endswith("gamma"):
            out[name] = np.ones(shape, dtype=np.float32)
        elif len(shape) == 1:
            out[name] = np.zeros(shape, dtype=np.float32)
        elif len(shape) == 2:
            out[name] = xavier_uniform(gen, shape[0], shape[1])
        else:
            k, cin, cout = shape
            out[name] = xavier_uniform(gen, k * cin, cout, shape=shape)
    return out


def flatten_block(cfg: BackboneConfig, weights: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(weights[name], dtype=np.float32).reshape(-1) for name, _ in block_layout(cfg)])


def unflatten_block(cfg: BackboneConfig, flat) -> dict[str, Tensor]:
    """View a flat block vector as named tensors.

    ``flat`` of shape (P,) gives natural shapes; (B, P) gives batched tensors
    (matrices (B, *shape), vectors (B, 1, n)).
    """
    flat = ag.as_tensor(flat)
    out, off = {}, 0
    batched = flat.ndim == 2
    for name, shape in block_layout(cfg):
        n = int(np.prod(shape))
        if batched:
            piece = flat[:, off:off + n]
            tgt = (flat.shape[0], 1, n) if len(shape) == 1 else (flat.shape[0],) + shape
        else:
            piece = flat[off:off + n]
            tgt = shape
        out[name] = ag.reshape(piece, tgt)
        off += n
    if off != flat.shape[-1]:
        raise ag.ShapeError(f"flat block has {flat.shape[-1]} values, layout needs {off}")
    return out


# ---------------------------------------------------------------------------
# shared head


@dataclass
class SharedHead:
    item_emb: Tensor  # (n_items, d)
    pos_emb: Tensor  # (max_seq_len, d)
    final_gamma: Tensor
    final_beta: Tensor

    @classmethod
    def init(cls, cfg: BackboneConfig, gen: np.random.Generator) -> "SharedHead":
        std = cfg.d ** -0.5
        return cls(
            ag.parameter(gen.normal(0, std, size=(cfg.n_items, cfg.d))),
            ag.parameter(gen.normal(0, std, size=(cfg.max_seq_len, cfg.d))),
            ag.parameter(np.ones(cfg.d)),
            ag.parameter(np.zeros(cfg.d)),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"item_emb": self.item_emb, "pos_emb": self.pos_emb,
                "final_ln.gamma": self.final_gamma, "final_ln.beta": self.final_beta}

    def embed(self, seq: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        seq = np.asarray(seq)
        t = seq.shape[1]
        if t > self.pos_emb.shape[0]:
            raise ag.ContractViolation(f"sequence length {t} exceeds max_seq_len {self.pos_emb.shape[0]}")
        x = ag.embedding(self.item_emb, seq)
        if mask is not None and not mask.all():
            x = x * Tensor(mask[..., None].astype(np.float32))
        return x + self.pos_emb[:t]

    def finalize(self, h: Tensor, eps: float = 1e-5) -> Tensor:
        return layer_norm_affine(h, self.final_gamma, self.final_beta, eps)

    def score(self, rep: Tensor, candidates: np.ndarray | None = None) -> Tensor:
        """Dot-product scores of representations against (candidate) item embeddings."""
        table = self.item_emb if candidates is None else ag.embedding(self.item_emb, np.asarray(candidates))
        return ag.matmul(rep, ag.transpose(table, (1, 0)))


# ---------------------------------------------------------------------------
# blocks


def _identity(x: Tensor) -> Tensor:
    return x


def attention_block(cfg: BackboneConfig, w: dict[str, Tensor], x: Tensor, drop=_identity) -> Tensor:
    bsz, t, d = x.shape
    nh = cfg.heads
    dh = d // nh
    a = layer_norm_affine(x, w["ln1.gamma"], w["ln1.beta"], cfg.ln_eps)

    def heads(z):
        return ag.transpose(ag.reshape(z, (bsz, t, nh, dh)), (0, 2, 1, 3))

    q = heads(ag.linear(a, w["wq"], w["bq"]))
    k = heads(ag.linear(a, w["wk"], w["bk"]))
    v = heads(ag.linear(a, w["wv"], w["bv"]))
    p = ag.softmax(ag.causal_scores(q, k, 1.0 / np.sqrt(dh)), axis=-1)
    o = ag.reshape(ag.transpose(ag.matmul(p, v), (0, 2, 1, 3)), (bsz, t, d))
    x = x + drop(ag.linear(o, w["wo"], w["bo"]))
    f = layer_norm_affine(x, w["ln2.gamma"], w["ln2.beta"], cfg.ln_eps)
    return x + drop(ag.linear(ag.relu(ag.linear(f, w["w1"], w["b1"])), w["w2"], w["b2"]))


def conv_block(cfg: BackboneConfig, w: dict[str, Tensor], x: Tensor, index: int, drop=_identity) -> Tensor:
    d1, d2 = cfg.dilations[index]
    h = ag.relu(layer_norm_affine(x, w["ln1.gamma"], w["ln1.beta"], cfg.ln_eps))
    h = ag.causal_conv1d(h, w["conv1.w"], d1) + w["conv1.b"]
    h = ag.relu(layer_norm_affine(h, w["ln2.gamma"], w["ln2.beta"], cfg.ln_eps))
    h = ag.causal_conv1d(h, w["conv2.w"], d2) + w["conv2.b"]
    return x + drop(h)


def run_block(cfg: BackboneConfig, index: int, w: dict[str, Tensor], x: Tensor, drop=_identity) -> Tensor:
    if cfg.family == "attention":
        return attention_block(cfg, w, x, drop)
    return conv_block(cfg, w, x, index, drop)


def _select_rows(cfg: BackboneConfig, w: dict[str, Tensor], rows: np.ndarray) -> dict[str, Tensor]:
    """Restrict batched block weights to a subset of examples; shared ones pass through."""
    natural = {name: len(shape) for name, shape in block_layout(cfg)}
    return {name: (t[rows] if t.ndim > natural[name] else t) for name, t in w.items()}


def check_hard_gate(gate: np.ndarray) -> None:
    g = np.asarray(gate)
    if g.shape[-1] != 2 or not np.all((g == 0) | (g == 1)) or not np.all(g.sum(axis=-1) == 1):
        raise GateError("deploy mode needs one-hot gate rows (execute, skip)")


def encode(cfg: BackboneConfig, weights: list[dict[str, Tensor]], shared: SharedHead, seq: np.ndarray,
           gate=None, mode: str = "train-masked", mask: np.ndarray | None = None, drop=None) -> Tensor:
    """Run the gated block stack and the final norm; returns (B, T, d) representations.

    ``gate`` is None (all blocks execute), a hard (L, 2) / (B, L, 2) array, or
    in ``train-masked`` mode a (B, L, 2) tensor such as the straight-through
    composite ``I + v' - sg(v')``. In ``train-masked`` mode every block runs and
    its output is mixed by the gate; in ``deploy-assembled`` mode skipped blocks
    are never evaluated. ``drop`` (training only) is applied to the embedded
    input and to every residual branch.
    """
    seq = np.asarray(seq)
    if seq.ndim == 1:
        seq = seq[None]
    if seq.size == 0 or seq.shape[1] == 0:
        raise ag.ContractViolation("sequence is empty")
    if len(weights) != cfg.n_blocks:
        raise ag.ShapeError(f"expected {cfg.n_blocks} block weight sets, got {len(weights)}")
    bsz = seq.shape[0]
    drop = drop or _identity
    h = drop(shared.embed(seq, mask))

    if mode == "deploy-assembled":
        hard = np.ones((cfg.n_blocks, 2)) * [1, 0] if gate is None else np.asarray(ag.as_tensor(gate).data)
        check_hard_gate(hard)
        if hard.ndim == 2:
            for index in np.flatnonzero(hard[:, 0] == 1):
                if weights[index] is None:
                    raise ag.ContractViolation(f"block {index} is kept but has no weights")
                h = run_block(cfg, int(index), weights[index], h)
            return shared.finalize(h, cfg.ln_eps)
        if hard.shape[0] != bsz:
            raise ag.ShapeError(f"gate batch {hard.shape[0]} does not match sequence batch {bsz}")
        # examples that share a bitmap share an execution path
        bitmaps = hard[:, :, 0].astype(bool)
        groups: dict[bytes, list[int]] = {}
        for b in range(bsz):
            groups.setdefault(bitmaps[b].tobytes(), []).append(b)
        pieces, order = [], []
        for rows in groups.values():
            rows_arr = np.asarray(rows)
            hg = h[rows_arr]
            for index in np.flatnonzero(bitmaps[rows[0]]):
                hg = run_block(cfg, int(index), _select_rows(cfg, weights[index], rows_arr), hg)
            pieces.append(hg)
            order.extend(rows)
        merged = ag.concat(pieces, axis=0)
        inverse = np.argsort(np.asarray(order))
        return shared.finalize(merged[inverse], cfg.ln_eps)

    if mode != "train-masked":
        raise ValueError(f"unknown mode {mode!r}")
    if gate is None:
        for index in range(cfg.n_blocks):
            h = run_block(cfg, index, weights[index], h, drop)
        return shared.finalize(h, cfg.ln_eps)
    g = ag.as_tensor(gate)
    if g.ndim == 2:
        g = ag.reshape(g, (1,) + g.shape)
    for index in range(cfg.n_blocks):
        out = run_block(cfg, index, weights[index], h, drop)
        execute = ag.reshape(g[:, index, 0], (g.shape[0], 1, 1))
        skip = ag.reshape(g[:, index, 1], (g.shape[0], 1, 1))
        h = out * execute + h * skip
    return shared.finalize(h, cfg.ln_eps)


def gated_forward(cfg: BackboneConfig, weights, shared: SharedHead, seq, gate=None,
                  mode: str = "train-masked", mask=None, candidates=None) -> Tensor:
    """Per-position scores over the item catalog (or over ``candidates``)."""
    return shared.score(encode(cfg, weights, shared, seq, gate, mode, mask), candidates)


# ---------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class ParamCount:
    per_tensor: dict
    per_block: int
    blocks: int
    shared: int

    @property
    def total(self) -> int:
        return self.blocks + self.shared


def shared_param_count(cfg: BackboneConfig) -> int:
    return cfg.n_items * cfg.d + cfg.max_seq_len * cfg.d + 2 * cfg.d


def block_param_count(cfg: BackboneConfig, kept=None) -> ParamCount:
    """Exact trainable-scalar counts; ``kept`` (bitmap of length L) restricts the block total."""
    per_tensor = {name: int(np.prod(shape)) for name, shape in block_layout(cfg)}
    per_block = sum(per_tensor.values())
    n_kept = cfg.n_blocks if kept is None else int(np.count_nonzero(np.asarray(kept)))
    return ParamCount(per_tensor, per_block, per_block * n_kept, shared_param_count(cfg))


def block_flops(cfg: BackboneConfig, seq_len: int, index: int = 0) -> int:
    t, d = seq_len, cfg.d
    if cfg.family == "attention":
        f = cfg.ffn
        nh = cfg.heads
        proj = 4 * (2 * t * d * d + t * d)
        attn = 2 * t * t * d + t * t * nh + SOFTMAX_FLOPS * t * t * nh + 2 * t * t * d
        ffn = 2 * t * d * f + t * f + ACT_FLOPS * t * f + 2 * t * f * d + t * d
        norms = 2 * LN_FLOPS * t * d
        residual = 2 * t * d
        return proj + attn + ffn + norms + residual
    k = cfg.kernel
    conv = 2 * (2 * k * d * d * t + t * d)
    return conv + 2 * LN_FLOPS * t * d + 2 * ACT_FLOPS * t * d + t * d


def head_flops(cfg: BackboneConfig, seq_len: int, n_candidates: int | None = None, score_positions: int = 1) -> int:
    n = cfg.n_items if n_candidates is None else n_candidates
    return seq_len * cfg.d + LN_FLOPS * seq_len * cfg.d + score_positions * 2 * cfg.d * n


def flops_count(cfg: BackboneConfig, gate=None, seq_len: int | None = None,
                n_candidates: int | None = None, score_positions: int = 1) -> int:
    """Inference FLOPs of one forward pass over executed blocks plus the head.

    Convention: a (m x k)(k x n) product costs 2mkn; convolutions cost
    2 * kernel * c_in * c_out per position; norms, softmax, activations, bias and
    residual adds cost a fixed number of FLOPs per element. Only the last
    position is scored unless ``score_positions`` says otherwise.
    """
    t = cfg.max_seq_len if seq_len is None else seq_len
    if gate is None:
        kept = np.ones(cfg.n_blocks, dtype=bool)
    else:
        g = np.asarray(ag.as_tensor(gate).data if isinstance(gate, Tensor) else gate)
        kept = g[:, 0] == 1 if g.ndim == 2 else np.asarray(g, dtype=bool)
    total = sum(block_flops(cfg, t, i) for i in np.flatnonzero(kept))
    return int(total + head_flops(cfg, t, n_candidates, score_positions))


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n
