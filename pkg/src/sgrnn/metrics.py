"""Metrics export: an append-only CSV per run plus a JSON summary.

The CSV has the fixed header ``epoch,split,metric,value`` and contains no
timestamps, so two identical runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

HEADER = ["epoch", "split", "metric", "value"]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


class MetricsWriter:
    """Append-only CSV writer with the fixed run-metrics header."""

    def __init__(self, path, resume: bool = False):
        self.path = Path(path)
        exists = self.path.exists()
        if exists and not resume:
            raise FileExistsError(f"{self.path} already exists; use resume or a fresh out dir")
        self._fh = open(self.path, "a", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh)
        if not exists:
            self._writer.writerow(HEADER)
            self._fh.flush()

    def row(self, epoch, split: str, metric: str, value) -> None:
        self._writer.writerow([_fmt(epoch), split, metric, _fmt(value)])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list:
    """Parse a metrics CSV back into (epoch, split, metric, value) tuples."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        for rec in reader:
            rows.append((float(rec[0]), rec[1], rec[2], float(rec[3])))
    return rows


def write_summary(path, summary: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
