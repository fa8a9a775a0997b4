"""
Result files and console tables.

Numbers are written with ``repr`` so that identical runs produce
byte-identical files.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import platform
from importlib import metadata
from typing import Any, Dict, Iterable, List, Optional, Sequence

from .config import RunConfig
from .errors import NumericalError
from .synthbench import harmonic_mean
from .types import GzslResult, LossRecord

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("label", "acc_u", "acc_s", "h")
TRACE_COLUMNS = ("iteration", "class_id", "cos_term", "reg_term", "total")
PACKAGES = ("numpy", "scipy", "Pillow", "python-dotenv")

# Published full-scale results of the attribute (and caption) variants, as fractions.
REFERENCE_ROWS = (
    GzslResult(0.216, 0.378, 0.275, "reference AWA2 ResNet101 fixed"),
    GzslResult(0.423, 0.388, 0.405, "reference AWA2 ResNet101 FT"),
    GzslResult(0.438, 0.307, 0.361, "reference AWA2 VGG16 fixed"),
    GzslResult(0.353, 0.755, 0.481, "reference AWA2 VGG16 FT"),
    GzslResult(0.102, 0.577, 0.173, "reference CUB ResNet101 fixed"),
    GzslResult(0.207, 0.418, 0.277, "reference CUB ResNet101 FT"),
    GzslResult(0.170, 0.546, 0.267, "reference CUB VGG16 fixed"),
    GzslResult(0.315, 0.449, 0.370, "reference CUB VGG16 FT"),
    GzslResult(0.221, 0.257, 0.238, "reference CUB ResNet101 FT captions"),
    GzslResult(0.159, 0.465, 0.236, "reference CUB VGG16 FT captions"),
)


def _ensure_dir(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> str:
    """Fixed-column CSV; missing keys become empty cells."""
    _ensure_dir(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(column)) for column in columns])
    logger.info(f"Wrote {path}")
    return path


def write_json(path: str, payload: Any) -> str:
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Wrote {path}")
    return path


def write_trace_csv(path: str, trace: Sequence[LossRecord]) -> str:
    return write_csv(path, TRACE_COLUMNS, (vars(record) for record in trace))


def check_results(results: Sequence[GzslResult]) -> None:
    """Reject non-finite metrics and stored H values that disagree with their accuracies."""
    for result in results:
        values = (result.acc_unseen, result.acc_seen, result.harmonic)
        if not all(math.isfinite(v) for v in values):
            raise NumericalError(f"non-finite metric in {result.label or 'result'}: {values}")
        expected = harmonic_mean(result.acc_unseen, result.acc_seen)
        if not math.isclose(expected, result.harmonic, rel_tol=1e-12, abs_tol=1e-15):
            raise NumericalError(f"{result.label}: stored H {result.harmonic} differs from {expected}")


def format_table(results: Sequence[GzslResult], title: str = "") -> str:
    """Acc_U / Acc_S / H in percent, one line per result."""
    width = max([len("Method")] + [len(r.label) for r in results])
    lines = []
    if title:
        lines.append(title)
    header = f"{'Method':<{width}}  {'Acc_U':>6}  {'Acc_S':>6}  {'H':>6}"
    lines += [header, "-" * len(header)]
    for r in results:
        lines.append(f"{r.label:<{width}}  {100 * r.acc_unseen:6.1f}  {100 * r.acc_seen:6.1f}  {100 * r.harmonic:6.1f}")
    return "\n".join(lines)


def emit_report(
    results: Sequence[GzslResult],
    out_dir: str,
    name: str = "metrics",
    with_reference: bool = False,
    title: str = "",
) -> str:
    """
    Write ``<name>.csv`` and return the summary table.

    Args:
        results: Metric triples, in display order
        out_dir: Directory the CSV goes to
        name: File stem
        with_reference: Append the published full-scale rows to the table (not the CSV)
        title: Optional first line of the table

    Returns:
        The human-readable table
    """
    check_results(results)
    write_csv(os.path.join(out_dir, f"{name}.csv"), METRIC_COLUMNS, (r.as_row() for r in results))
    shown: List[GzslResult] = list(results)
    if with_reference:
        shown += list(REFERENCE_ROWS)
    return format_table(shown, title)


def package_versions(packages: Sequence[str] = PACKAGES) -> Dict[str, Optional[str]]:
    versions: Dict[str, Optional[str]] = {}
    for package in packages:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = None
    return versions


def run_meta(config: RunConfig, command: str) -> Dict[str, Any]:
    """Seed, config hash and library versions; no timestamps, so reruns match byte for byte."""
    return {
        "command": command,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "python": platform.python_version(),
        "versions": package_versions(),
    }
