"""
Run directories, manifests and markdown reports.

Artifacts never carry wall-clock timestamps: rerunning a command with the
same config and seeds reproduces every file byte for byte.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from settings import VERSION, PipelineConfig, config_hash

logger = logging.getLogger(__name__)

# Configuration
RUN_PREFIX = "run-"
HASH_CHARS = 10
SPLIT_STD_WARNING = 0.05


def run_directory(config: PipelineConfig, base: Optional[Path] = None) -> Path:
    """runs/run-<config hash>; identical configs share a directory."""
    base = Path(base) if base is not None else Path(config.output_dir)
    path = base / f"{RUN_PREFIX}{config_hash(config)[:HASH_CHARS]}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(run_dir: Path, config: PipelineConfig, command: str,
                   outputs: Dict[str, Path]) -> Path:
    """manifest-<command>.json: version, seeds, config snapshot and output digests."""
    run_dir = Path(run_dir)
    manifest = {
        "version": VERSION,
        "command": command,
        "config_hash": config_hash(config),
        "seeds": {"pipeline": config.seed, "synthetic": config.synthetic.seed},
        "deterministic": config.deterministic,
        "config": config.to_dict(),
        "outputs": {name: {"path": Path(p).name, "sha256": file_digest(p)}
                    for name, p in sorted(outputs.items())},
    }
    path = run_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def markdown_table(frame: pd.DataFrame, float_format: str = "{:.5f}") -> str:
    """Plain pipe table; index becomes the first column."""
    frame = frame.reset_index()
    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    lines = [header, rule]
    for row in frame.itertuples(index=False):
        cells = [float_format.format(v) if isinstance(v, (float, np.floating)) else str(v) for v in row]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


class BacktestReporter:
    """Markdown summary of a backtest: component scores per split and per level."""

    def __init__(self, result, config: PipelineConfig):
        self.result = result
        self.config = config
        self.table = result.score_table()

    def generate_recommendations(self) -> List[str]:
        recommendations = []
        if "mean" not in self.table.index or "ensemble" not in self.table.columns:
            return ["⚠️ No ensemble scores recorded."]
        mean = self.table.loc["mean"]
        groups = mean.drop(labels=["ensemble"])
        if len(groups):
            best = groups.idxmin()
            if mean["ensemble"] > groups[best]:
                recommendations.append(
                    f"⚠️ Ensemble mean WRMSSE ({mean['ensemble']:.4f}) is above the best single group "
                    f"{best} ({groups[best]:.4f}). Revisit the blend exponents.")
        std = self.table.loc["std"]
        if std["ensemble"] > SPLIT_STD_WARNING:
            recommendations.append(
                f"⚠️ Ensemble WRMSSE varies by {std['ensemble']:.4f} across splits. "
                "Scores from a single split are not reliable for tuning.")
        if not recommendations:
            recommendations.append("✅ Ensemble beats every single group and is stable across splits.")
        return recommendations

    def generate_report(self) -> str:
        per_level = self.result.per_level()
        ensemble = per_level[per_level["component"] == "ensemble"]
        by_level = ensemble.pivot_table(index="level", columns="split", values="score", aggfunc="first")
        mean_row = self.table.loc["mean"] if "mean" in self.table.index else None

        report = f"""# Backtest Report

**Config:** {config_hash(self.config)[:HASH_CHARS]}
**Splits:** {', '.join(r.split.name for r in self.result.splits)}
**Groups:** {', '.join(g.name for g in self.config.enabled_groups())}

---

## Summary

"""
        if mean_row is not None:
            for name, value in mean_row.items():
                report += f"- **{name}:** mean WRMSSE {value:.5f}\n"

        report += "\n---\n\n## Recommendations\n\n"
        for i, rec in enumerate(self.generate_recommendations(), 1):
            report += f"{i}. {rec}\n"

        report += "\n---\n\n## Scores per Split\n\n"
        report += markdown_table(self.table)
        report += "\n## Ensemble Loss per Level\n\n"
        report += markdown_table(by_level)
        return report

    def save_report(self, run_dir: Path) -> Path:
        path = Path(run_dir) / "backtest-report.md"
        path.write_text(self.generate_report(), encoding="utf-8")
        return path


class EvaluationReporter:
    """Markdown summary of a scored forecast file."""

    def __init__(self, report, source: Path, start_day: int):
        self.report = report
        self.source = Path(source)
        self.start_day = start_day

    def generate_report(self) -> str:
        levels = self.report.per_level.set_index("level")[["score"]]
        metric = self.report.metric.upper()
        worst = int(levels["score"].idxmax())
        report = f"""# Evaluation Report

**File:** {self.source.name}
**Window:** d_{self.start_day} onward
**Metric:** W{metric}

---

## Summary

- **Total:** {self.report.total:.6f}
- **Excluded degenerate series:** {len(self.report.excluded)}
- **Worst level:** {worst} ({levels.loc[worst, 'score']:.5f})

---

## {metric} per Level

"""
        report += markdown_table(levels)
        if self.report.excluded:
            report += "\n## Excluded Series\n\n"
            for level, key in self.report.excluded:
                report += f"⚠️ level {level}: {key}\n"
        return report

    def save_report(self, run_dir: Path, stem: str) -> Path:
        path = Path(run_dir) / f"{stem}-report.md"
        path.write_text(self.generate_report(), encoding="utf-8")
        return path
