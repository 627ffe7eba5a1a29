"""Multi-seed comparison of MCL-OKD against independently trained peers.

The baseline is the same peer graph trained with cross-entropy only
(``beta = 0``, no distillation term).
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

from .evaluation import format_results_table, summary_record
from .trainer import fit, load_splits

logger = logging.getLogger(__name__)


def baseline_config(config):
    return config.replace(beta=0.0, use_kl=False)


@dataclass
class ComparisonReport:
    seeds: List[int]
    runs: Dict[str, List[dict]] = field(default_factory=dict)        # method -> final record per seed
    histories: Dict[str, List[list]] = field(default_factory=dict)   # method -> per-epoch records per seed
    seconds: Dict[str, List[float]] = field(default_factory=dict)    # method -> training time per seed

    def errors(self, method, key="eval_error"):
        return [r[key] for r in self.runs[method]]

    def records(self):
        rows = []
        for method in self.runs:
            rows.append(summary_record(method, self.errors(method), self.seeds))
            rows.append(summary_record(f"{method} (Ens)", self.errors(method, "ensemble_error"), self.seeds))
        return rows

    def table(self):
        return format_results_table(self.records())

    def to_dict(self):
        return {"seeds": self.seeds, "runs": self.runs, "seconds": self.seconds, "summary": self.records()}


def run_comparison(config, seeds, out_dir=None):
    """Train MCL-OKD and the baseline once per seed on the same data."""
    splits = load_splits(config)
    methods = (("MCL-OKD", config), ("Baseline", baseline_config(config)))
    report = ComparisonReport(list(seeds), *({m: [] for m, _ in methods} for _ in range(3)))
    for seed in seeds:
        for method, cfg in methods:
            cfg = cfg.replace(seed=seed)
            run_dir = Path(out_dir) / method / f"seed_{seed}" if out_dir is not None else None
            start = time.perf_counter()
            result = fit(cfg, out_dir=run_dir, splits=splits)
            report.seconds[method].append(time.perf_counter() - start)
            final = dict(result.history[-1]) if result.history else {}
            final["seed"] = seed
            report.runs[method].append(final)
            report.histories[method].append(result.history)
            logger.info("%s seed %d: deploy %.2f%%  ensemble %.2f%%", method, seed,
                        final.get("eval_error", float("nan")), final.get("ensemble_error", float("nan")))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "comparison.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        (Path(out_dir) / "comparison.txt").write_text(report.table() + "\n")
    return report
