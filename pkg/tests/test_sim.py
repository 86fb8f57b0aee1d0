import numpy as np
import pytest

from fofa.protocol import fit_candidate_projection, request_size
from fofa.sim import CloudService, SessionPolicy, run_session, simulate_fleet, split_sessions
from oracles import small_model


def _cloud(model, n=10):
    return CloudService(model, None, n_candidates=n)


def _two_cluster_model():
    """Items 0-14 embed along e0 and items 15-29 along e1, so window means are easy to reason about."""
    model = small_model("forward-ofa", n_items=30)
    emb = np.zeros((30, 8), np.float32)
    emb[:15, 0] = 1
    emb[15:, 1] = 1
    emb.flags.writeable = False
    model.shared.item_emb.data = emb
    return model


def test_every_s_refresh_count():
    model = small_model()
    res = run_session(model, _cloud(model), 0, np.arange(6), np.arange(20) % 30, SessionPolicy("every-S", 5))
    assert res.refreshes == 4
    assert [e["t"] for e in res.trace if e["kind"] == "request"] == [0, 5, 10, 15]
    assert res.uplink_bytes == 4 * request_size(3, 16)
    assert len(res.ranks) == 20


def test_short_session_has_exactly_one_exchange():
    model = small_model()
    res = run_session(model, _cloud(model), 3, [1, 2, 3], [4, 5, 6], SessionPolicy("every-S", 10))
    kinds = [(e["direction"], e["kind"]) for e in res.trace]
    assert kinds == [("uplink", "request"), ("downlink", "model"), ("downlink", "candidates")]
    assert res.uplink_bytes + res.downlink_bytes == sum(e["bytes"] for e in res.trace)


def test_drift_policy_refreshes_when_the_window_moves():
    # history and the first 10 session items come from cluster A, the rest from cluster B. With a
    # 4-item window the cosine distance to the reference (pure A) is 0, .051, .293, .684 at
    # t = 10..13, so the only drift refresh is at t = 13; the re-armed reference is pure B.
    model = _two_cluster_model()
    session = np.r_[np.arange(10) % 15, 15 + np.arange(10) % 15]
    res = run_session(model, _cloud(model), 0, np.arange(8), session, SessionPolicy("drift", 4, 0.5))
    reasons = [(e["t"], e["reason"]) for e in res.trace if e["kind"] == "request"]
    assert reasons == [(0, "initial"), (13, "drift")]
    assert res.drift_refreshes == 1


def test_stable_interest_never_triggers_drift():
    model = _two_cluster_model()
    res = run_session(model, _cloud(model), 0, np.arange(8), np.arange(30) % 15, SessionPolicy("drift", 4, 0.5))
    assert res.refreshes == 1


def test_predictions_rerank_cached_candidates():
    model = small_model()
    cloud = CloudService(model, None, n_candidates=5)  # candidates are items 0-4
    res = run_session(model, cloud, 0, [1, 2], [3, 20, 0], SessionPolicy("every-S", 10))
    assert np.isfinite(res.ranks[0]) and res.ranks[0] <= 5
    assert res.ranks[1] == float("inf")


def test_fleet_is_thread_count_invariant_and_additive(gen):
    model = small_model(max_seq_len=12)
    devices = [(gen.integers(0, 30, size=8), gen.integers(0, 30, size=int(gen.integers(3, 15)))) for _ in range(12)]
    proj = fit_candidate_projection(model, [h for h, _ in devices])
    cloud = CloudService(model, proj, 10)
    policy = SessionPolicy("every-S", 4)
    one = simulate_fleet(model, cloud, devices, policy, threads=1, catalog_size=30)
    many = simulate_fleet(model, cloud, devices, policy, threads=4, catalog_size=30)
    assert [s.summary() for s in one.sessions] == [s.summary() for s in many.sessions]
    agg = one.aggregate()
    assert agg["uplink_bytes"] == sum(s.uplink_bytes for s in one.sessions)
    assert agg["downlink_bytes"] == sum(sum(e["bytes"] for e in s.trace if e["direction"] == "downlink")
                                        for s in one.sessions)
    assert agg["backward_calls"] == 0 and agg["privacy_pass"]
    assert agg["refreshes"] == sum(-(-len(s) // 4) for _, s in devices)


def test_policy_validation():
    with pytest.raises(ValueError):
        SessionPolicy("sometimes")
    with pytest.raises(ValueError):
        SessionPolicy("every-S", 0)


def test_split_sessions():
    from fofa.data import SplitDataset

    data = SplitDataset([np.arange(10)], np.array([10]), 11, np.arange(1), np.arange(11))
    ((hist, sess),) = split_sessions(data, 4)
    np.testing.assert_array_equal(hist, [0, 1, 2, 3])
    np.testing.assert_array_equal(sess, [4, 5, 6, 7, 8, 9, 10])


def test_drift_policy_catches_injected_switches():
    # empirical oracle: items embed near their cluster's centroid, so a regime
    # switch (which always changes cluster) moves the window mean
    from fofa.data import SyntheticSpec, preprocess, synthesize

    spec = SyntheticSpec(n_users=40, items_per_cluster=30, seq_len=50, switch_prob=0.6, seed=11)
    log = synthesize(spec)
    data = preprocess(log, 20, 1)
    model = small_model("forward-ofa", n_items=data.n_items, d=8, max_seq_len=20)
    noise = np.random.default_rng(0).normal(0, 0.25, size=(data.n_items, 8))
    clusters = data.item_ids // spec.items_per_cluster
    emb = (np.eye(8)[clusters] + noise).astype(np.float32)
    emb.flags.writeable = False
    model.shared.item_emb.data = emb
    history_len, caught, quiet = 20, [], []
    for u, (history, session) in enumerate(split_sessions(data, history_len)):
        injected = int(np.sum(log.extra["switch_points"][u] > history_len))
        res = run_session(model, _cloud(model), u, history, session, SessionPolicy("drift", 5, 0.3))
        if injected:
            caught.append(res.drift_refreshes >= injected)
        else:
            quiet.append(res.drift_refreshes)
    assert len(caught) >= 10
    assert np.mean(caught) >= 0.8
    # and it is not simply refreshing all the time
    assert np.mean(quiet) <= 0.5
