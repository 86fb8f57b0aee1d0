"""Session and fleet simulation over an in-process, byte-counting channel."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import flops_count
from .metrics import rank_of_target
from .protocol import (AuditResult, DeviceRequest, candidate_payload, cloud_assemble, deserialize_model,
                       device_prepare_request, fixed_size_audit, parse_candidates, privacy_audit,
                       select_candidates, serialize_model)

POLICIES = ("every-S", "drift")


@dataclass(frozen=True)
class SessionPolicy:
    """``every-S`` refreshes at interactions 0, S, 2S, ...; ``drift`` refreshes at the
    start and whenever the mean embedding of the last ``interval`` items moves
    more than ``threshold`` (cosine distance) from its value measured
    ``interval`` interactions after the previous refresh."""

    kind: str = "every-S"
    interval: int = 10
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.kind!r}")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")


class CloudService:
    """The cloud end of the channel: bytes in, bytes out, no per-device state."""

    def __init__(self, model, projection: np.ndarray | None = None, n_candidates: int = 500):
        self.model = model
        self.projection = projection
        self.n_candidates = n_candidates

    def handle(self, request_bytes: bytes) -> tuple[bytes, bytes, dict]:
        request = DeviceRequest.from_bytes(request_bytes)
        assembled = cloud_assemble(request, self.model)
        if self.projection is not None:
            items = select_candidates(self.model, self.projection, request.h, self.n_candidates)
        else:
            n = min(self.n_candidates, self.model.cfg.backbone.n_items)
            items = np.arange(n)
        return serialize_model(assembled), candidate_payload(self.model, items), assembled.cost.to_dict()


@dataclass
class SessionState:
    model: object = None  # AssembledModel
    candidates: np.ndarray | None = None
    candidate_emb: np.ndarray | None = None
    since_refresh: int = 0
    reference: np.ndarray | None = None
    drift: float = 0.0


@dataclass
class SessionResult:
    device: int
    trace: list[dict]
    refreshes: int
    drift_refreshes: int
    uplink_bytes: int
    downlink_bytes: int
    assembly_flops: int
    inference_flops: int
    ranks: list[float]
    backward_calls: int = 0
    requests: list[bytes] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("trace")
        d.pop("requests")
        d.pop("ranks")
        return d


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(1 - a @ b / (na * nb))


def run_session(model, cloud: CloudService, device_id: int, history, session, policy: SessionPolicy,
                k: int = 10) -> SessionResult:
    """Serve ``session`` interaction by interaction from cached state, refreshing per ``policy``.

    Every network message is appended to the trace with its byte count. Each
    prediction reranks the cached candidates with the cached assembled model.
    """
    cfg = model.cfg.backbone
    emb = model.shared.item_emb.data
    hist = [int(x) for x in np.asarray(history).ravel()]
    if not hist:
        raise ValueError("device history is empty")
    state = SessionState()
    trace: list[dict] = []
    ranks: list[float] = []
    totals = {"up": 0, "down": 0, "assembly": 0, "flops": 0, "refresh": 0, "drift": 0, "backward": 0}
    requests = []

    def window_mean():
        return emb[hist[-policy.interval:]].mean(axis=0)

    def refresh(t: int, reason: str):
        req = device_prepare_request(model, device_id, hist).to_bytes()
        requests.append(req)
        trace.append({"device": device_id, "t": t, "direction": "uplink", "kind": "request", "reason": reason,
                      "bytes": len(req)})
        model_bytes, cand_bytes, cost = cloud.handle(req)
        state.model = deserialize_model(model_bytes, cfg)
        trace.append({"device": device_id, "t": t, "direction": "downlink", "kind": "model", "reason": reason,
                      "bytes": len(model_bytes), "kept": int(np.count_nonzero(state.model.bitmap)),
                      "bitmap": "".join("1" if b else "0" for b in state.model.bitmap)})
        trace.append({"device": device_id, "t": t, "direction": "downlink", "kind": "candidates",
                      "reason": reason, "bytes": len(cand_bytes)})
        state.candidates, state.candidate_emb = parse_candidates(cand_bytes, cfg.d)
        state.since_refresh = 0
        state.reference = None
        totals["up"] += len(req)
        totals["down"] += len(model_bytes) + len(cand_bytes)
        totals["assembly"] += cost["assembly_flops"]
        totals["backward"] += cost["backward_calls"]
        totals["refresh"] += 1
        totals["drift"] += reason == "drift"

    for t, item in enumerate(np.asarray(session).ravel()):
        if t == 0:
            refresh(t, "initial")
        elif policy.kind == "every-S" and t % policy.interval == 0:
            refresh(t, "every-S")
        elif policy.kind == "drift" and state.reference is not None:
            state.drift = _cosine_distance(window_mean(), state.reference)
            if state.drift > policy.threshold:
                refresh(t, "drift")
        seq = np.asarray(hist[-cfg.max_seq_len:])
        rep = state.model.encode(model.shared, seq).data[0, -1]
        scores = state.candidate_emb @ rep
        totals["flops"] += flops_count(cfg, state.model.bitmap, seq_len=len(seq), n_candidates=len(scores))
        if int(item) in set(state.candidates.tolist()):
            ranks.append(rank_of_target(scores, int(item), state.candidates))
        else:
            ranks.append(float("inf"))
        hist.append(int(item))
        state.since_refresh += 1
        if state.reference is None and state.since_refresh >= policy.interval:
            state.reference = window_mean()
    return SessionResult(device_id, trace, totals["refresh"], totals["drift"], totals["up"], totals["down"],
                         totals["assembly"], totals["flops"], ranks, totals["backward"], requests)


@dataclass
class FleetReport:
    sessions: list[SessionResult]
    audit: AuditResult

    def aggregate(self, k: int = 10) -> dict:
        s = self.sessions
        ranks = np.concatenate([np.asarray(r.ranks, dtype=np.float64) for r in s]) if s else np.zeros(0)
        hit = ranks <= k
        ndcg = np.where(hit, 1.0 / np.log2(np.where(hit, ranks, 1) + 1), 0.0)
        n = max(len(s), 1)
        return {
            "devices": len(s),
            "uplink_bytes": int(sum(r.uplink_bytes for r in s)),
            "downlink_bytes": int(sum(r.downlink_bytes for r in s)),
            "refreshes": int(sum(r.refreshes for r in s)),
            "mean_refreshes": sum(r.refreshes for r in s) / n,
            "drift_refreshes": int(sum(r.drift_refreshes for r in s)),
            "mean_drift_refreshes": sum(r.drift_refreshes for r in s) / n,
            "assembly_flops": int(sum(r.assembly_flops for r in s)),
            "inference_flops": int(sum(r.inference_flops for r in s)),
            "backward_calls": int(sum(r.backward_calls for r in s)),
            "ndcg": float(ndcg.mean()) if ranks.size else 0.0,
            "hit": float(hit.mean()) if ranks.size else 0.0,
            "privacy_pass": self.audit.passed,
        }


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FOFA_THREADS", "1")))
    except ValueError:
        return 1


def simulate_fleet(model, cloud: CloudService, devices, policy: SessionPolicy, threads: int | None = None,
                   catalog_size: int | None = None) -> FleetReport:
    """``devices`` is a list of (history, session) pairs. Devices share nothing mutable."""
    threads = worker_count() if threads is None else threads

    def one(args):
        i, (history, session) = args
        return run_session(model, cloud, i, history, session, policy)

    jobs = list(enumerate(devices))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            sessions = list(pool.map(one, jobs))
    else:
        sessions = [one(j) for j in jobs]
    messages = [m for s in sessions for m in s.requests]
    findings = []
    for m in messages:
        res = privacy_audit(m, catalog_size)
        findings.extend(res.findings)
    size = fixed_size_audit(messages)
    findings.extend(size.findings)
    return FleetReport(sessions, AuditResult(not findings, findings))


def split_sessions(data, history_len: int):
    """(history, session) per user from full sequences: the first ``history_len`` items are history."""
    out = []
    for u in range(data.n_users):
        seq = data.full_sequence(u)
        out.append((seq[:history_len], seq[history_len:]))
    return out
