"""The full recommender: shared head + (controller) + (mapper | shared blocks).

Modes
-----
``device-rec``
    one shared block stack, every block executes.
``controller-only``
    shared block stack gated per example by the structure controller.
``mapper-only``
    generated block weights, every block executes, no structure logits.
``forward-ofa``
    controller gates + generated weights seeded by the structure logits.
``no-structural-vector``
    as ``forward-ofa`` but the seed projection is fixed at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import BackboneConfig, SharedHead, encode, init_block
from .controller import (ControllerWeights, GumbelConfig, StructureLogits, extract_structure_logits,
                         gumbel_relax, harden)
from .layers import Dropout
from .mapper import MapperWeights, as_block_weights, extract_latent, generate_weights

MODES = ("forward-ofa", "device-rec", "controller-only", "mapper-only", "no-structural-vector")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig
    mode: str = "forward-ofa"
    d_c: int | None = None
    d_m: int | None = None
    injection: str = "initial-state"
    execute_bias: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def uses_controller(self) -> bool:
        return self.mode in ("forward-ofa", "controller-only", "no-structural-vector")

    @property
    def uses_mapper(self) -> bool:
        return self.mode in ("forward-ofa", "mapper-only", "no-structural-vector")

    @property
    def controller_width(self) -> int:
        return self.backbone.d if self.d_c is None else self.d_c

    @property
    def latent_width(self) -> int:
        return 2 * self.backbone.d if self.d_m is None else self.d_m

    def to_dict(self) -> dict:
        return {"backbone": self.backbone.to_dict(), "mode": self.mode, "d_c": self.d_c, "d_m": self.d_m,
                "injection": self.injection, "execute_bias": self.execute_bias}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig.from_dict(d["backbone"])
        return cls(**d)


@dataclass
class ForwardResult:
    rep: Tensor  # (B, T, d) final representations
    logits: StructureLogits | None = None
    relaxed: Tensor | None = None  # v'
    hard: np.ndarray | None = None  # I, (B, L, 2)
    latent: Tensor | None = None
    block_weights: list | None = None
    extras: dict = field(default_factory=dict)

    def kept(self, n_blocks: int) -> np.ndarray:
        """(B, L) bitmap of executed blocks."""
        if self.hard is None:
            return np.ones((self.rep.shape[0], n_blocks), dtype=bool)
        return self.hard[..., 0] == 1


class ForwardOFA:
    def __init__(self, cfg: ModelConfig, shared: SharedHead, controller: ControllerWeights | None = None,
                 mapper: MapperWeights | None = None, blocks: list[dict[str, Tensor]] | None = None):
        self.cfg = cfg
        self.shared = shared
        self.controller = controller
        self.mapper = mapper
        self.blocks = blocks

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ForwardOFA":
        gen = np.random.default_rng(np.random.SeedSequence([seed, 0x0FA]))
        bb = cfg.backbone
        shared = SharedHead.init(bb, gen)
        controller = mapper = blocks = None
        if cfg.uses_controller:
            controller = ControllerWeights.init(gen, bb.d, bb.n_blocks, cfg.controller_width, cfg.execute_bias)
        if cfg.uses_mapper:
            mapper = MapperWeights.init(gen, bb, cfg.latent_width, cfg.injection,
                                        zero_seed=cfg.mode == "no-structural-vector")
        else:
            blocks = [{k: ag.parameter(v) for k, v in init_block(bb, gen).items()} for _ in range(bb.n_blocks)]
        return cls(cfg, shared, controller, mapper, blocks)

    # -- parameters ------------------------------------------------------
    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"shared.{k}": v for k, v in self.shared.tensors().items()}
        if self.controller is not None:
            out.update({f"controller.{k}": v for k, v in self.controller.tensors().items()})
        if self.mapper is not None:
            out.update({f"mapper.{k}": v for k, v in self.mapper.tensors().items()})
        if self.blocks is not None:
            for i, blk in enumerate(self.blocks):
                out.update({f"blocks.{i}.{k}": v for k, v in blk.items()})
        return out

    def trainable(self) -> dict[str, Tensor]:
        named = self.named_tensors()
        if self.mapper is not None and self.mapper.seed_frozen:
            named.pop("mapper.seed.w")
        return named

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named_tensors()
        missing = set(named) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for name, t in named.items():
            arr = np.array(arrays[name], dtype=np.float32)
            if arr.shape != t.shape:
                raise ag.ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            arr.flags.writeable = False
            t.data = arr

    # -- forward ---------------------------------------------------------
    def structure(self, ctx: np.ndarray, ctx_mask: np.ndarray | None = None) -> StructureLogits:
        emb = ag.embedding(self.shared.item_emb, np.asarray(ctx))
        return extract_structure_logits(self.controller, emb, ctx_mask)

    def latent(self, ctx: np.ndarray, beta: Tensor, ctx_mask: np.ndarray | None = None) -> Tensor:
        emb = ag.embedding(self.shared.item_emb, np.asarray(ctx))
        return extract_latent(self.mapper, emb, beta, ctx_mask)

    def forward(self, inputs: np.ndarray, mask: np.ndarray | None, ctx: np.ndarray | None = None,
                ctx_mask: np.ndarray | None = None, *, train: bool = False, rng=None,
                gumbel: GumbelConfig | None = None, gate_override: np.ndarray | None = None,
                deploy: bool = False, dropout: float = 0.0,
                noise: np.ndarray | None = None) -> ForwardResult:
        """Encode ``inputs`` (B, T) with structure and weights derived from ``ctx``.

        Training uses Gumbel straight-through gates; otherwise gates are the
        noiseless argmax, optionally replaced by ``gate_override`` (B, L, 2).
        ``deploy=True`` runs the assembled path, skipping blocks outright.
        ``dropout`` applies in training only, to the backbone and the latent.
        ``noise`` freezes the Gumbel draw (B, L, 2).
        """
        cfg = self.cfg
        bb = cfg.backbone
        inputs = np.asarray(inputs)
        bsz = inputs.shape[0]
        if ctx is None:
            ctx, ctx_mask = inputs, mask
        res = ForwardResult(rep=None)  # type: ignore[arg-type]
        drop = Dropout(dropout, rng.generator()) if train and dropout > 0 else None
        gate = None
        if cfg.uses_controller:
            logits = self.structure(ctx, ctx_mask)
            res.logits = logits
            if train:
                v, hard, gate = gumbel_relax(logits, rng, gumbel or GumbelConfig(), noise)
                res.relaxed, res.hard = v, hard
            else:
                res.hard = harden(logits)
                gate = res.hard
        if gate_override is not None:
            res.hard = np.asarray(gate_override, dtype=np.float32)
            gate = res.hard
        if cfg.uses_mapper:
            if res.logits is not None:
                beta = res.logits.beta
            else:
                beta = Tensor(np.zeros((bsz, bb.n_blocks, 2), np.float32))
            res.latent = self.latent(ctx, beta, ctx_mask)
            latent = res.latent if drop is None else drop(res.latent)
            blocks = None
            if deploy and res.hard is not None:
                blocks = res.hard[..., 0].any(axis=0)
            weights = as_block_weights(bb, generate_weights(self.mapper, latent, blocks))
        else:
            weights = self.blocks
        res.block_weights = weights
        mode = "deploy-assembled" if deploy else "train-masked"
        if deploy and gate is not None:
            gate = res.hard
        res.rep = encode(bb, weights, self.shared, inputs, gate, mode, mask, drop)
        return res
