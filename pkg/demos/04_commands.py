"""
The five commands end to end
=============================

``train``, ``evaluate``, ``simulate``, ``sweep`` and ``report`` are plain
functions over a ``RunConfig``. The same runs are available from a shell as
``python -m fofa <command> --config run.json``. Each command writes JSONL/CSV
artifacts that embed the config that produced them, and returns named checks.
"""

import tempfile
from pathlib import Path

from fofa.commands import RunConfig, run

tiny = {
    "synthetic": {"n_users": 60, "items_per_cluster": 40, "seq_len": 30},
    "backbone": {"family": "attention", "n_blocks": 4, "d": 8, "max_seq_len": 20},
    "train": {"epochs": 2},
    "history_len": 12, "n_candidates": 40, "lambda_grid": [0.0, 0.1],
}
root = Path(tempfile.mkdtemp(prefix="fofa-demo-"))


def go(command, out, **extra):
    result = run(RunConfig.from_dict({**tiny, "command": command, "out": str(root / out), **extra}))
    print(f"{command:9s} ok={result.ok} checks={result.checks}")
    return result


go("train", "fofa")
go("train", "shared", train={"epochs": 2, "mode": "device-rec"})
ckpts = [str(root / "fofa" / "model.ckpt"), str(root / "shared" / "model.ckpt")]
ev = go("evaluate", "eval", checkpoints=ckpts)
for row in ev.summary["rows"]:
    print(f"  {row['mode']:22s} NDCG@10 {row['ndcg']:.4f}")
go("simulate", "sim", checkpoints=ckpts[:1])
go("report", "sim")
go("sweep", "sweep")
go("report", "sweep")
print((root / "sweep" / "report_lambda_sweep.csv").read_text())
