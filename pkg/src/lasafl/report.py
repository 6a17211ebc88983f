"""Per-run output files: round CSV, JSON summary and resolved-config sidecar."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .metrics import filter_stats

CSV_COLUMNS = ("round", "accuracy", "loss", "tpr", "fpr", "agg_norm", "sel_counts")


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return repr(float(x))


def round_rows(records) -> list[dict]:
    rows = []
    for r in records:
        truth = {c: c not in r.malicious_ids for c in r.sampled_ids}
        stats = filter_stats(r.outcome, truth, r.sampled_ids)
        rows.append(
            {
                "round": r.round,
                "accuracy": r.test_accuracy,
                "loss": r.train_loss,
                "tpr": stats.tpr if stats.malicious_pairs else float("nan"),
                "fpr": stats.fpr if stats.benign_pairs else float("nan"),
                "client_tpr": stats.client_tpr if stats.malicious_pairs else float("nan"),
                "client_fpr": stats.client_fpr if stats.benign_pairs else float("nan"),
                "agg_norm": r.agg_norm,
                "sel_counts": ";".join(f"l{l}:{len(s)}" for l, s in enumerate(r.outcome.selected)),
            }
        )
    return rows


def rounds_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(
            [
                row["round"],
                _fmt(row["accuracy"]),
                _fmt(row["loss"]),
                _fmt(row["tpr"]),
                _fmt(row["fpr"]),
                _fmt(row["agg_norm"]),
                row["sel_counts"],
            ]
        )
    return buf.getvalue()


def _nanmean(values) -> float | None:
    arr = np.array([v for v in values if not math.isnan(v)])
    return float(arr.mean()) if arr.size else None


def summarize(rows, cfg: ExperimentConfig, tail: int = 50) -> dict:
    acc = [row["accuracy"] for row in rows]
    last = rows[-tail:]
    return {
        "name": cfg.name,
        "aggregator": cfg.aggregator.key,
        "attack": cfg.attack.kind if cfg.attack else "none",
        "rounds": len(rows),
        "final_accuracy": acc[-1] if acc else None,
        "best_accuracy": max(acc) if acc else None,
        "mean_tpr": _nanmean(r["tpr"] for r in rows),
        "mean_fpr": _nanmean(r["fpr"] for r in rows),
        "tail_rounds": len(last),
        "tail_mean_tpr": _nanmean(r["tpr"] for r in last),
        "tail_mean_fpr": _nanmean(r["fpr"] for r in last),
        "client_mean_tpr": _nanmean(r["client_tpr"] for r in rows),
        "client_mean_fpr": _nanmean(r["client_fpr"] for r in rows),
    }


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run(out_dir: Path, cfg: ExperimentConfig, records) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = round_rows(records)
    (out_dir / "rounds.csv").write_text(rounds_csv(rows))
    summary = summarize(rows, cfg)
    write_json(out_dir / "summary.json", summary)
    write_json(out_dir / "config.json", cfg.to_dict())
    return summary
