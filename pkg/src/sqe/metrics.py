"""Evaluation metrics: PCC, RMSE, and RMSE after third-order mapping.

The mapping step fits an unconstrained least-squares cubic from predictions
to labels and reports the residual RMSE, which compensates a systematic
miscalibration without rewarding rank errors. Everything here runs in
float64 and raises on degenerate inputs instead of inventing zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .tasks import TASKS


def pearson(x, y) -> float:
    """Sample Pearson correlation.

    Raises:
        DegenerateInputError: x or y has zero variance.
        ValueError: fewer than two pairs.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"pearson: lengths differ, {x.shape} vs {y.shape}")
    if x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs at least two pairs")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0:
        raise DegenerateInputError("pearson: first argument has zero variance")
    if syy == 0.0:
        raise DegenerateInputError("pearson: second argument has zero variance")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def rmse(pred, label) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ShapeError(f"rmse: lengths differ, {pred.shape} vs {label.shape}")
    if pred.ndim != 1 or pred.size < 1:
        raise ValueError("rmse needs at least one pair")
    return math.sqrt(math.fsum((pred - label) ** 2) / pred.size)


@dataclass(frozen=True)
class CubicFit:
    """Polynomial map label ~ a0 + a1*p + a2*p^2 + a3*p^3.

    degree records the order actually fit; anything below 3 means the
    design was rank-deficient (too few distinct predictions) and the fit
    fell back to the highest full-rank order, with ``flagged`` set.
    """

    coefficients: tuple
    degree: int
    flagged: bool


def third_order_fit(pred, label) -> CubicFit:
    """Least-squares cubic from predictions to labels.

    Solved via normal equations on standardized power columns, with the
    coefficients mapped back to the raw polynomial basis afterwards. With
    fewer than four distinct prediction values the degree drops to
    (distinct - 1), which still interpolates the identity map on the sample.
    """
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"third_order_fit: lengths differ, {p.shape} vs {y.shape}")
    if p.ndim != 1 or p.size < 1:
        raise ValueError("third_order_fit needs at least one pair")

    degree = min(3, np.unique(p).size - 1)
    while degree > 0:
        powers = np.stack([p**k for k in range(1, degree + 1)], axis=1)
        mu = powers.mean(axis=0)
        sd = powers.std(axis=0)
        if np.any(sd == 0.0):
            degree -= 1
            continue
        z = np.column_stack([np.ones_like(p), (powers - mu) / sd])
        gram = z.T @ z
        try:
            b = np.linalg.solve(gram, z.T @ y)
        except np.linalg.LinAlgError:
            degree -= 1
            continue
        coeffs = np.zeros(4)
        coeffs[1 : degree + 1] = b[1:] / sd
        coeffs[0] = b[0] - float((b[1:] * mu / sd).sum())
        return CubicFit(coefficients=tuple(coeffs), degree=degree, flagged=degree < 3)

    return CubicFit(coefficients=(float(y.mean()), 0.0, 0.0, 0.0), degree=0, flagged=True)


def apply_cubic(fit: CubicFit, pred) -> np.ndarray:
    p = np.asarray(pred, dtype=np.float64)
    a0, a1, a2, a3 = fit.coefficients
    return ((a3 * p + a2) * p + a1) * p + a0


def rmse_map(pred, label) -> float:
    """RMSE after the third-order mapping, fit on the same pairs.

    Least squares over a family containing (an interpolant of) the identity
    map, so the result never exceeds plain rmse beyond float noise.
    """
    fit = third_order_fit(pred, label)
    return rmse(apply_cubic(fit, pred), label)


@dataclass(frozen=True)
class TaskMetrics:
    task: str
    n: int
    pcc: float | None
    rmse: float | None
    rmse_map: float | None
    coefficients: tuple | None
    mapping_flagged: bool


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple

    def row(self, task: str) -> TaskMetrics:
        for r in self.rows:
            if r.task == task:
                return r
        raise KeyError(task)


def build_report(pairs_by_task: dict) -> MetricsReport:
    """Per-task metrics from aligned (prediction, label) pair lists.

    Tasks with fewer than four pairs report rmse only (pcc and rmse_map need
    a meaningful sample and a full cubic design). A degenerate pcc (constant
    predictions or labels) is reported as unavailable rather than raising.
    """
    rows = []
    ordered = [t for t in TASKS if t in pairs_by_task]
    ordered += [t for t in pairs_by_task if t not in TASKS]  # tolerate odd keys, last
    for task in ordered:
        pairs = list(pairs_by_task[task])
        n = len(pairs)
        if n == 0:
            rows.append(TaskMetrics(task, 0, None, None, None, None, False))
            continue
        pred = [p for p, _ in pairs]
        label = [l for _, l in pairs]
        r = rmse(pred, label)
        if n < 4:
            rows.append(TaskMetrics(task, n, None, r, None, None, False))
            continue
        try:
            pcc = pearson(pred, label)
        except DegenerateInputError:
            pcc = None
        fit = third_order_fit(pred, label)
        mapped = rmse(apply_cubic(fit, pred).tolist(), label)
        rows.append(TaskMetrics(task, n, pcc, r, mapped, fit.coefficients, fit.flagged))
    return MetricsReport(rows=tuple(rows))


def _cell(value) -> str:
    return "" if value is None else repr(float(value))


def report_to_csv(report: MetricsReport) -> str:
    lines = ["task,n,pcc,rmse,rmse_map,a0,a1,a2,a3"]
    for r in report.rows:
        coeffs = r.coefficients if r.coefficients is not None else (None,) * 4
        cells = [r.task, str(r.n), _cell(r.pcc), _cell(r.rmse), _cell(r.rmse_map)]
        cells += [_cell(c) for c in coeffs]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def format_table(report: MetricsReport) -> str:
    """Human-oriented fixed-width rendering of a report."""
    header = ("task", "n", "pcc", "rmse", "rmse_map", "mapping")
    body = []
    for r in report.rows:
        note = "degenerate" if (r.n >= 4 and r.coefficients is None) else ""
        if r.mapping_flagged:
            note = "rank-deficient fit"
        body.append((
            r.task,
            str(r.n),
            "-" if r.pcc is None else f"{r.pcc:.4f}",
            "-" if r.rmse is None else f"{r.rmse:.4f}",
            "-" if r.rmse_map is None else f"{r.rmse_map:.4f}",
            note,
        ))
    widths = [max(len(header[i]), *(len(row[i]) for row in body)) if body else len(header[i])
              for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*row) for row in body]
    return "\n".join(lines) + "\n"
