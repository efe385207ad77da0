"""Task vocabulary for quality and room-acoustics prediction.

Six per-utterance regression targets are supported. ``TASKS`` fixes their
canonical order, which is also the column order of dataset manifests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

TASKS = ("MOS", "SNR", "STI", "T60", "DRR", "C50")

TASK_UNITS = {
    "MOS": "",
    "SNR": "dB",
    "STI": "",
    "T60": "s",
    "DRR": "dB",
    "C50": "dB",
}

# Affine (shift, scale) per task: models train on (label - shift)/scale so
# the dB-valued targets land on roughly the same magnitude as MOS and STI
# under uniform loss weights. Inverted at prediction time.
DEFAULT_TARGET_SCALING = {
    "MOS": (0.0, 1.0),
    "SNR": (0.0, 10.0),
    "STI": (0.0, 1.0),
    "T60": (0.0, 1.0),
    "DRR": (0.0, 10.0),
    "C50": (0.0, 10.0),
}


@dataclass(frozen=True)
class TaskLabels:
    """Optional ground-truth value per task; ``None`` marks an absent label.

    Range checks: MOS must lie in [1, 5], STI in [0, 1], T60 must be
    non-negative. All present values must be finite.
    """

    mos: float | None = None
    snr: float | None = None
    sti: float | None = None
    t60: float | None = None
    drr: float | None = None
    c50: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not math.isfinite(v):
                raise ValueError(f"label {f.name} is not finite: {v!r}")
        if self.mos is not None and not 1.0 <= self.mos <= 5.0:
            raise ValueError(f"MOS out of range [1, 5]: {self.mos}")
        if self.sti is not None and not 0.0 <= self.sti <= 1.0:
            raise ValueError(f"STI out of range [0, 1]: {self.sti}")
        if self.t60 is not None and self.t60 < 0.0:
            raise ValueError(f"T60 must be >= 0: {self.t60}")

    def get(self, task: str) -> float | None:
        """Value for a canonical task name like ``"MOS"``; None if absent."""
        if task not in TASKS:
            raise KeyError(f"unknown task {task!r}")
        return getattr(self, task.lower())

    def present(self) -> tuple[str, ...]:
        """Tasks with a value, in canonical order."""
        return tuple(t for t in TASKS if self.get(t) is not None)

    @property
    def prediction_only(self) -> bool:
        return not self.present()

    @classmethod
    def of(cls, **values: float) -> "TaskLabels":
        """Build from canonical task names, e.g. ``TaskLabels.of(MOS=4.2)``."""
        for k in values:
            if k not in TASKS:
                raise ValueError(f"unknown task {k!r}")
        return cls(**{k.lower(): v for k, v in values.items()})
