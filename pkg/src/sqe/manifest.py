"""Dataset manifests: CSV files pairing audio/embedding paths with labels.

Column layout is fixed: ``path,mos,snr,sti,t60,drr,c50``. Empty cells mean
"this label was not annotated"; a row may also carry no labels at all, in
which case it is prediction-only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .errors import ManifestRowError, SchemaError
from .tasks import TASKS, TaskLabels

MANIFEST_COLUMNS = ("path",) + tuple(t.lower() for t in TASKS)


@dataclass(frozen=True)
class ManifestRow:
    """One dataset item: where its signal lives and which labels it has."""

    source_path: str
    labels: TaskLabels

    def __post_init__(self):
        if not self.source_path:
            raise ValueError("source_path must be nonempty")


def _parse_cell(name: str, text: str, line: int) -> float | None:
    text = text.strip()
    if not text:
        return None
    try:
        return float(text)
    except ValueError:
        raise ManifestRowError(line, f"column {name!r} has unparsable value {text!r}") from None


def load_manifest(path) -> list[ManifestRow]:
    """Parse a manifest CSV into rows, preserving file order.

    Raises:
        SchemaError: the header is missing a required column.
        ManifestRowError: a cell fails to parse or violates a label range;
            the error carries the 1-based line number.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("manifest is empty (no header row)") from None
        header = [h.strip().lower() for h in header]
        for col in MANIFEST_COLUMNS:
            if col not in header:
                raise SchemaError(f"manifest header is missing column {col!r}")
        index = {col: header.index(col) for col in MANIFEST_COLUMNS}

        rows: list[ManifestRow] = []
        for line, record in enumerate(reader, start=2):
            if not record or all(not c.strip() for c in record):
                continue  # blank line
            if len(record) < len(header):
                raise ManifestRowError(line, f"expected {len(header)} cells, got {len(record)}")
            source_path = record[index["path"]].strip()
            if not source_path:
                raise ManifestRowError(line, "empty path cell")
            values = {
                t: _parse_cell(t.lower(), record[index[t.lower()]], line) for t in TASKS
            }
            try:
                labels = TaskLabels.of(**{t: v for t, v in values.items() if v is not None})
            except ValueError as exc:
                raise ManifestRowError(line, str(exc)) from None
            rows.append(ManifestRow(source_path=source_path, labels=labels))
    return rows


def save_manifest(rows, path) -> None:
    """Write rows as a manifest CSV; load_manifest reads it back unchanged."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for row in rows:
            cells = [row.source_path]
            for t in TASKS:
                v = row.labels.get(t)
                cells.append("" if v is None else repr(float(v)))
            writer.writerow(cells)
