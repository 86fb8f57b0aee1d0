"""
One request, one forward pass, one session
==========================================

The device sends a fixed-size request (structure logits and a latent vector,
no item ids). The cloud runs the generator forward once and returns the
kept blocks plus candidate embeddings. The device then serves a session
from that cache.
"""

import numpy as np

from fofa.backbone import BackboneConfig
from fofa.data import SyntheticSpec, preprocess, synthesize
from fofa.model import ForwardOFA, ModelConfig
from fofa.protocol import (adaptation_cost_report, cloud_assemble, deserialize_model, device_prepare_request,
                           fit_candidate_projection, privacy_audit, serialize_model)
from fofa.sim import CloudService, SessionPolicy, run_session, simulate_fleet, split_sessions

data = preprocess(synthesize(SyntheticSpec(n_users=60, items_per_cluster=40, seq_len=40, seed=1)), 20, 1)
bb = BackboneConfig(family="attention", n_blocks=6, d=16, n_items=data.n_items, max_seq_len=30)
model = ForwardOFA.init(ModelConfig(bb, mode="forward-ofa"), seed=1)

history = data.train[0][:20]
request = device_prepare_request(model, device_id=0, seq=history)
blob = request.to_bytes()
print("request bytes:", len(blob), "audit:", privacy_audit(blob, data.n_items))

assembled = cloud_assemble(request, model)
print("kept blocks:", assembled.bitmap.astype(int).tolist())
print("assembly cost:", assembled.cost.to_dict())

wire = serialize_model(assembled)
print("model bytes:", len(wire), "round trip exact:", serialize_model(deserialize_model(wire, bb)) == wire)

# one-forward adaptation against fine-tuning on the same history
report = adaptation_cost_report(model, history)
print(f"adaptation {report['adaptation_flops']:,} FLOPs vs fine-tune epoch {report['finetune_flops']:,} "
      f"(x{report['flops_ratio']:.0f}), backward passes {report['backward_passes']}")

# a session served from the cache, refreshing every 5 interactions
devices = [(h, s) for h, s in split_sessions(data, 20) if len(s)]
cloud = CloudService(model, fit_candidate_projection(model, [h for h, _ in devices]), n_candidates=50)
session = run_session(model, cloud, 0, *devices[0], SessionPolicy("every-S", 5))
for event in session.trace[:6]:
    print(event)
print("refreshes", session.refreshes, "uplink", session.uplink_bytes, "downlink", session.downlink_bytes)

# the whole fleet, drift-triggered refreshes this time
fleet = simulate_fleet(model, cloud, devices, SessionPolicy("drift", 10, 0.3), catalog_size=data.n_items)
print({k: v for k, v in fleet.aggregate().items() if not isinstance(v, float) or np.isfinite(v)})
