"""
Gates, straight-through gradients and the compact loss
=======================================================

A tiny model with two blocks: look at the structure logits, the hard gate the
backbone sees, and the gradient that flows back through the relaxed sample.
"""

import numpy as np

from fofa import autograd as ag
from fofa.backbone import BackboneConfig
from fofa.controller import GumbelConfig, gumbel_relax, harden
from fofa.model import ForwardOFA, ModelConfig
from fofa.rng import RngState
from fofa.training import compact_loss, rec_loss

bb = BackboneConfig(family="attention", n_blocks=2, d=8, n_items=30, max_seq_len=12)
model = ForwardOFA.init(ModelConfig(bb, mode="forward-ofa"), seed=0)
seq = np.random.default_rng(0).integers(0, 30, size=(1, 10))

# the controller reads the sequence and emits one (execute, skip) pair per block
logits = model.structure(seq)
print("beta:\n", logits.beta.data[0])
print("alpha (softmax over each pair):\n", logits.alpha[0].round(3))

# at inference the gate is the argmax; ties go to execute
print("inference gate:\n", harden(logits)[0])

# during training a Gumbel sample decides, and the gate value is exactly one-hot
v, hard, gate = gumbel_relax(logits, RngState(3), GumbelConfig(tau=5.0))
print("relaxed sample:\n", v.data[0].round(3))
print("gate value (equals the hard sample):\n", gate.data[0])

# gradients reach the controller through the relaxed sample
with ag.Tape():
    res = model.forward(seq[:, :-1], None, train=True, rng=RngState(3))
    scores = model.shared.score(ag.reshape(res.rep, (9, bb.d)))
    loss = rec_loss(scores, seq[0, 1:]) + compact_loss(res.logits)[0] * 0.1
    grads = ag.backward(loss, [model.controller.head_b])
print("loss", float(loss.data))
print("d loss / d controller bias:", grads[model.controller.head_b].round(4))

# the compact term alone pushes every block toward skip
c, clamped = compact_loss(logits)
print("compact loss", float(c.data), "clamped:", clamped)
