"""Plot-ready CSV extraction from a run's metrics.jsonl.

`report` is a pure function of the metrics file: it never recomputes
model passes.  One CSV per diagnostic panel; column meanings are documented
in the README.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .errors import FormatError

REPORT_FILES = (
    "losses.csv",
    "grad_norm_variance.csv",
    "cosine_per_tap.csv",
    "mse_per_tap.csv",
    "cka.csv",
    "entropy.csv",
)


def load_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        raise FormatError(f"no metrics.jsonl under {run_dir}")
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"metrics.jsonl line {line_no} is not valid JSON") from exc
    return records


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def write_report(run_dir, out_dir=None) -> list[Path]:
    """Extract one CSV per diagnostic panel; returns the written paths."""
    records = load_metrics(run_dir)
    out = Path(out_dir) if out_dir is not None else Path(run_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(name: str, header: list[str], rows: list[list]) -> None:
        path = out / name
        _write_csv(path, header, rows)
        written.append(path)

    emit("losses.csv", ["step", "split", "loss_total"],
         [[r.get("step"), r.get("split"), r.get("loss_total")] for r in records])

    emit("grad_norm_variance.csv", ["step", "grad_norm", "emb_var"],
         [[r.get("step"), r.get("grad_norm"), r.get("emb_var")]
          for r in records if r.get("grad_norm") is not None or r.get("emb_var") is not None])

    emit("cosine_per_tap.csv", ["step", "split", "loss_cos_tap1", "loss_cos_tap2"],
         [[r.get("step"), r.get("split"), r.get("loss_cos_tap1"), r.get("loss_cos_tap2")]
          for r in records if r.get("loss_cos_tap1") is not None])

    emit("mse_per_tap.csv", ["step", "split", "loss_mse_tap1", "loss_mse_tap2"],
         [[r.get("step"), r.get("split"), r.get("loss_mse_tap1"), r.get("loss_mse_tap2")]
          for r in records if r.get("loss_mse_tap1") is not None])

    emit("cka.csv",
         ["step", "cka_pre_tap1", "cka_post_tap1", "cka_pre_tap2", "cka_post_tap2",
          "cka_pre_tap1_raw", "cka_post_tap1_raw", "cka_pre_tap2_raw", "cka_post_tap2_raw"],
         [[r.get("step"), r.get("cka_pre_tap1"), r.get("cka_post_tap1"),
           r.get("cka_pre_tap2"), r.get("cka_post_tap2"),
           r.get("cka_pre_tap1_raw"), r.get("cka_post_tap1_raw"),
           r.get("cka_pre_tap2_raw"), r.get("cka_post_tap2_raw")]
          for r in records if r.get("cka_pre_tap1") is not None])

    entropy_rows = []
    for r in records:
        if r.get("entropy_profile") is not None:
            baseline = r.get("entropy_uniform")
            entropy_rows = [[i, h, baseline] for i, h in enumerate(r["entropy_profile"])]
    emit("entropy.csv", ["position", "entropy", "uniform_baseline"], entropy_rows)

    return written
