"""Append-only CSV logs.

Loss values are written with ``repr`` so a log is an exact record of the
float64 trajectory; wall-clock timings go to a separate file so the metrics
log of a rerun stays byte-identical.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

DET_COLUMNS = ("det", "det_cls", "det_l1", "det_iou")


def loss_columns(placement: str, backbone_mode: str, decoder_mode: str) -> list[str]:
    cols = ["step", "phase", *DET_COLUMNS]
    if "backbone" in placement:
        cols += ["global_align", "masked_align", "oaa"] if backbone_mode == "oaa" else ["global_align", "oaa"]
    if "decoder" in placement:
        cols.append(decoder_mode)
    cols.append("total")
    return cols


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvLog:
    """One header, then one row per ``append``; rows are flushed as written."""

    def __init__(self, path: str | Path, columns: Sequence[str], resume_at: int | None = None):
        self.path = Path(path)
        self.columns = list(columns)
        if resume_at is None or not self.path.exists():
            self._fh = open(self.path, "w", newline="")
            csv.writer(self._fh, lineterminator="\n").writerow(self.columns)
        else:
            self._truncate_after(resume_at)
            self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")

    def _truncate_after(self, step: int) -> None:
        # drop rows past the resume point so the log continues without duplicates
        with open(self.path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != self.columns:
            raise ValueError(f"{self.path}: header does not match the configured columns")
        kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) < step]
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(kept)

    def append(self, row: dict) -> None:
        self._writer.writerow([_cell(row.get(c)) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_rows(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
