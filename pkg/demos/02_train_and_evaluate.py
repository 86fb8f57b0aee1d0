"""
Training on a small synthetic multi-interest dataset
=====================================================

Users follow a few interest clusters with cluster-specific dynamics. We train
a shared backbone (device-rec) and the per-device structure + weight generator
(forward-ofa) for a handful of epochs, then compare them and the gate
ablations. The full-size settings used by the acceptance tests take minutes
per run; this version runs in well under a minute.
"""

from fofa.backbone import BackboneConfig
from fofa.data import SyntheticSpec, preprocess, synthesize
from fofa.metrics import GATE_POLICIES, block_usage, evaluate
from fofa.model import ModelConfig
from fofa.training import TrainConfig, fit

spec = SyntheticSpec(n_users=120, items_per_cluster=60, seq_len=30, seed=0)
data = preprocess(synthesize(spec), 20, 1)
print(data.stats())

bb = BackboneConfig(family="attention", n_blocks=4, d=16, n_items=data.n_items, max_seq_len=30)

results = {}
for mode in ("device-rec", "forward-ofa"):
    cfg = TrainConfig(mode=mode, epochs=4, seed=0, lam=0.01)
    state = fit(data, ModelConfig(bb, mode=mode), cfg)
    results[mode] = state.model
    last = state.history[-1]
    print(f"{mode:12s} final batch: rec {last.rec:.3f} compact {last.compact:.3f} blocks {last.executed:.2f}")

# held-out next item, ranked against the whole catalog
for mode, model in results.items():
    r = evaluate(model, data)
    print(f"{mode:12s} NDCG@10 {r.ndcg:.4f}  Hit@10 {r.hit:.3f}  blocks {r.mean_blocks:.2f}  FLOPs {r.mean_flops:,.0f}")

# same trained generator, different ways of choosing which blocks run
model = results["forward-ofa"]
for policy in GATE_POLICIES:
    r = evaluate(model, data, policy)
    print(f"  gate {policy:12s} NDCG@10 {r.ndcg:.4f}  blocks {r.mean_blocks:.2f}")

# how often each block is kept across devices
print("block usage:", block_usage(evaluate(model, data).kept).tolist())
