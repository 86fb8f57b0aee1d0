"""Experiment commands: train, evaluate, simulate, sweep, report.

Each command takes a :class:`RunConfig`, writes its artifacts under
``cfg.out`` (every artifact carries the full config) and returns a
:class:`CommandResult` whose ``ok`` flag drives the exit status.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .backbone import BackboneConfig
from .data import SplitDataset, SyntheticSpec, ingest, preprocess, synthesize
from .metrics import GATE_POLICIES, block_count_distribution, block_usage, evaluate
from .model import ModelConfig
from .protocol import fit_candidate_projection
from .sim import CloudService, SessionPolicy, simulate_fleet, split_sessions
from .training import TrainConfig, fit, lambda_sweep

log = logging.getLogger(__name__)

COMMANDS = ("train", "evaluate", "simulate", "sweep", "report")
IDENTITY_TOL = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "train"
    dataset: str | None = None
    synthetic: dict | None = None
    min_interactions: int = 20
    backbone: dict = field(default_factory=lambda: {"family": "attention", "n_blocks": 6, "d": 32,
                                                      "max_seq_len": 50})
    model: dict = field(default_factory=dict)  # d_c, d_m, injection, execute_bias
    train: dict = field(default_factory=dict)  # TrainConfig fields
    seed: int = 0
    policy: dict = field(default_factory=lambda: {"kind": "every-S", "interval": 10, "threshold": 0.5})
    history_len: int = 20
    n_candidates: int = 500
    sampled_negatives: int | None = None
    checkpoints: list = field(default_factory=list)
    lambda_grid: list = field(default_factory=lambda: [0.0, 1e-3, 1e-2, 1e-1])
    sweep_seeds: list = field(default_factory=lambda: [0])
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        errors = []
        if self.command not in COMMANDS:
            errors.append(f"command: must be one of {COMMANDS}")
        if self.command in ("train", "evaluate", "simulate", "sweep") and not (self.dataset or self.synthetic is not None):
            errors.append("dataset: give a dataset path or synthetic settings")
        if self.dataset and self.synthetic is not None:
            errors.append("dataset: give either a path or synthetic settings, not both")
        if self.command in ("evaluate", "simulate") and not self.checkpoints:
            errors.append("checkpoints: at least one checkpoint is required")
        try:
            self.train_config()
        except (TypeError, ValueError) as e:
            errors.append(f"train: {e}")
        try:
            self.backbone_config(1)
        except (TypeError, ValueError) as e:
            errors.append(f"backbone: {e}")
        try:
            SessionPolicy(**self.policy)
        except (TypeError, ValueError) as e:
            errors.append(f"policy: {e}")
        if self.synthetic is not None:
            try:
                SyntheticSpec(**self.synthetic)
            except (TypeError, ValueError) as e:
                errors.append(f"synthetic: {e}")
        if errors:
            raise ConfigError("; ".join(errors))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def backbone_config(self, n_items: int) -> BackboneConfig:
        return BackboneConfig(**{**self.backbone, "n_items": n_items})

    def model_config(self, n_items: int) -> ModelConfig:
        return ModelConfig(self.backbone_config(n_items), mode=self.train_config().mode, **self.model)


@dataclass
class CommandResult:
    ok: bool
    checks: dict
    artifacts: list[str]
    summary: dict = field(default_factory=dict)


def load_dataset(cfg: RunConfig) -> SplitDataset:
    if cfg.dataset:
        return preprocess(ingest(cfg.dataset), cfg.min_interactions)
    spec = SyntheticSpec(**{"seed": cfg.seed, **(cfg.synthetic or {})})
    # generated catalogs can hold more items than 20x the number of events allows; filter users only
    return preprocess(synthesize(spec), cfg.min_interactions, 1)


# ---------------------------------------------------------------------------
# artifact writers


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_jsonl(path: Path, rows, cfg: RunConfig) -> str:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({**row, "run_config": cfg.to_dict()}, sort_keys=True) + "\n")
    return str(path)


def write_csv(path: Path, rows: list[dict], cfg: RunConfig) -> str:
    buf = io.StringIO()
    buf.write("# run_config: " + json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
    if rows:
        cols = list(rows[0])
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in cols})
    path.write_text(buf.getvalue())
    return str(path)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def read_jsonl(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> CommandResult:
    cfg.validate()
    out = _out(cfg)
    data = load_dataset(cfg)
    tc = cfg.train_config()
    mc = cfg.model_config(data.n_items)
    epochs = []
    state = fit(data, mc, tc, on_epoch=lambda st, summary: epochs.append(summary))
    identity_ok = all(abs(r.total - (r.rec + r.lam * r.compact)) <= IDENTITY_TOL for r in state.history)
    steps = [r.to_dict() for r in state.history]
    artifacts = [write_jsonl(out / "train_log.jsonl", epochs, cfg), write_jsonl(out / "steps.jsonl", steps, cfg)]
    res = evaluate(state.model, data, sampled_negatives=cfg.sampled_negatives, seed=cfg.seed)
    row = {"run_id": out.name, "mode": tc.mode, "lam": tc.lam, "tau": tc.tau, **res.row()}
    path = out / "model.ckpt"
    ckpt_io.save(path, ckpt_io.capture(state.model, tc, state.rng, state.optimizer, {"run_config": cfg.to_dict()}))
    artifacts += [str(path), write_jsonl(out / "metrics.jsonl", [row], cfg), write_csv(out / "metrics.csv", [row], cfg)]
    checks = {"loss_identity": identity_ok, "finite_metrics": bool(np.isfinite(res.ndcg))}
    return CommandResult(all(checks.values()), checks, artifacts, row)


def _load_model(path: str, cfg: RunConfig, data: SplitDataset):
    ck = ckpt_io.load(path)
    model = ck.model()
    if model.cfg.backbone.n_items != data.n_items:
        raise ConfigError(f"checkpoint {path} has {model.cfg.backbone.n_items} items, dataset has {data.n_items}")
    return model


def cmd_evaluate(cfg: RunConfig) -> CommandResult:
    cfg.validate()
    out = _out(cfg)
    data = load_dataset(cfg)
    rows, usage = [], {}
    checks = {}
    for path in cfg.checkpoints:
        model = _load_model(path, cfg, data)
        policies = GATE_POLICIES if model.cfg.uses_controller else ("learned",)
        results = {}
        for policy in policies:
            res = evaluate(model, data, policy, seed=cfg.seed, sampled_negatives=cfg.sampled_negatives)
            results[policy] = res
            label = model.cfg.mode if policy == "learned" else policy
            rows.append({"run_id": out.name, "checkpoint": str(path), "mode": label, **res.row()})
        learned = results["learned"]
        usage[str(path)] = {"block_usage": block_usage(learned.kept).tolist(),
                            "block_counts": block_count_distribution(learned.kept).tolist()}
        if "first-k" in results:
            full = learned.kept.all(axis=1)
            checks[f"{path}:first-k-consistent"] = bool(
                np.array_equal(results["first-k"].ranks[full], results["all-execute"].ranks[full]))
    checks["finite_metrics"] = all(np.isfinite(r["ndcg"]) for r in rows)
    artifacts = [write_jsonl(out / "evaluate.jsonl", rows, cfg), write_csv(out / "evaluate.csv", rows, cfg)]
    (out / "usage.json").write_text(json.dumps({"usage": usage, "run_config": cfg.to_dict()}, sort_keys=True))
    artifacts.append(str(out / "usage.json"))
    return CommandResult(all(checks.values()), checks, artifacts, {"rows": rows})


def cmd_simulate(cfg: RunConfig) -> CommandResult:
    cfg.validate()
    out = _out(cfg)
    data = load_dataset(cfg)
    model = _load_model(cfg.checkpoints[0], cfg, data)
    if model.mapper is None or model.controller is None:
        raise ConfigError("simulation needs a checkpoint with a controller and a mapper")
    devices = [(h, s) for h, s in split_sessions(data, cfg.history_len) if len(s)]
    projection = fit_candidate_projection(model, [h for h, _ in devices])
    cloud = CloudService(model, projection, cfg.n_candidates)
    report = simulate_fleet(model, cloud, devices, SessionPolicy(**cfg.policy), catalog_size=data.n_items)
    agg = report.aggregate()
    traces = [event for s in report.sessions for event in s.trace]
    per_device = [s.summary() for s in report.sessions]
    checks = {
        "privacy_audit": report.audit.passed,
        "zero_backward_in_assembly": agg["backward_calls"] == 0,
        "byte_additivity": agg["uplink_bytes"] + agg["downlink_bytes"] == sum(e["bytes"] for e in traces),
    }
    artifacts = [write_jsonl(out / "traces.jsonl", traces, cfg),
                 write_jsonl(out / "devices.jsonl", per_device, cfg),
                 write_jsonl(out / "simulate.jsonl", [agg], cfg),
                 write_csv(out / "simulate.csv", [agg], cfg)]
    return CommandResult(all(checks.values()), checks, artifacts, agg)


def compactness_trend(rows: list[dict], key: str, max_inversions: int = 1) -> bool:
    """Mean of ``key`` over seeds is non-increasing in lambda, allowing a few inversions."""
    by_lam: dict[float, list[float]] = {}
    for r in rows:
        by_lam.setdefault(r["lam"], []).append(r[key])
    means = [np.mean(by_lam[k]) for k in sorted(by_lam)]
    inversions = sum(b > a for a, b in zip(means, means[1:]))
    return bool(inversions <= max_inversions)


def cmd_sweep(cfg: RunConfig) -> CommandResult:
    cfg.validate()
    out = _out(cfg)
    data = load_dataset(cfg)
    tc = cfg.train_config()
    rows = lambda_sweep(data, sorted(cfg.lambda_grid), cfg.model_config(data.n_items), tc, cfg.sweep_seeds)
    rows.sort(key=lambda r: (r["lam"], r["seed"]))
    checks = {"flops_trend": compactness_trend(rows, "mean_flops"),
              "blocks_trend": compactness_trend(rows, "mean_blocks")}
    artifacts = [write_jsonl(out / "sweep.jsonl", rows, cfg), write_csv(out / "sweep.csv", rows, cfg)]
    return CommandResult(all(checks.values()), checks, artifacts, {"rows": rows})


def cmd_report(cfg: RunConfig) -> CommandResult:
    """Plot-ready CSVs from a run directory: sweep curves, block usage, block counts."""
    run = Path(cfg.out)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} does not exist")
    artifacts, checks, summary = [], {}, {}
    sweep = run / "sweep.jsonl"
    traces = run / "traces.jsonl"
    usage = run / "usage.json"
    if not (sweep.exists() or traces.exists() or usage.exists()):
        raise FileNotFoundError(f"no sweep, trace or usage artifacts in {run}")
    if sweep.exists():
        rows = read_jsonl(sweep)
        by_lam: dict[float, list[dict]] = {}
        for r in rows:
            by_lam.setdefault(r["lam"], []).append(r)
        curve = []
        for lam in sorted(by_lam):
            group = by_lam[lam]
            curve.append({"lam": lam, "seeds": len(group),
                          **{k: float(np.mean([g[k] for g in group]))
                             for k in ("ndcg", "hit", "mean_flops", "mean_params", "mean_blocks")}})
        artifacts.append(write_csv(run / "report_lambda_sweep.csv", curve, cfg))
        summary["lambda_sweep"] = curve
    bitmaps = None
    if traces.exists():
        first: dict[int, str] = {}
        for e in read_jsonl(traces):
            if e["kind"] == "model" and e["device"] not in first:
                first[e["device"]] = e["bitmap"]
        bitmaps = np.array([[c == "1" for c in first[d]] for d in sorted(first)], dtype=bool)
    elif usage.exists():
        entry = next(iter(json.loads(usage.read_text())["usage"].values()))
        hist = np.asarray(entry["block_usage"])
        counts = np.asarray(entry["block_counts"])
    if bitmaps is not None:
        hist = block_usage(bitmaps)
        counts = block_count_distribution(bitmaps)
        checks["usage_recount"] = int(hist.sum()) == int(bitmaps.sum()) and int(counts.sum()) == len(bitmaps)
    if traces.exists() or usage.exists():
        artifacts.append(write_csv(run / "report_block_usage.csv",
                                   [{"block": i, "count": int(c)} for i, c in enumerate(hist)], cfg))
        artifacts.append(write_csv(run / "report_block_counts.csv",
                                   [{"kept_blocks": i, "devices": int(c)} for i, c in enumerate(counts)], cfg))
        summary["block_usage"] = hist.tolist()
        summary["block_counts"] = counts.tolist()
    return CommandResult(all(checks.values()) if checks else True, checks, artifacts, summary)


RUNNERS = {"train": cmd_train, "evaluate": cmd_evaluate, "simulate": cmd_simulate, "sweep": cmd_sweep,
           "report": cmd_report}


def run(cfg: RunConfig) -> CommandResult:
    return RUNNERS[cfg.command](cfg)


def load_config(path: str | os.PathLike | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def merge(base: dict, **overrides) -> RunConfig:
    """Config file values overridden by flags (``None`` means not given)."""
    d = dict(base)
    train = dict(d.get("train", {}))
    for key in ("mode", "lam", "tau"):
        if overrides.get(key) is not None:
            train[key] = overrides.pop(key)
        else:
            overrides.pop(key, None)
    d["train"] = train
    for key, value in overrides.items():
        if value is not None:
            d[key] = value
    return RunConfig.from_dict(d)


def replace_out(cfg: RunConfig, out: str) -> RunConfig:
    return replace(cfg, out=out)
