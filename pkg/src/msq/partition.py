"""Row partitioner: assign low-variance rows to SP2 and the rest to fixed-point."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .tensor import row_variance


@dataclass(frozen=True, eq=False)
class RowPartition:
    is_sp2: np.ndarray
    theta: float
    pr_sp2: float

    def __len__(self):
        return len(self.is_sp2)

    @property
    def sp2_rows(self) -> np.ndarray:
        return np.flatnonzero(self.is_sp2)

    @property
    def fixed_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.is_sp2)

    def row_schemes(self, fixed_scheme, sp2_scheme) -> list:
        return [sp2_scheme if s else fixed_scheme for s in self.is_sp2]

    @classmethod
    def uniform(cls, rows: int, sp2: bool = False) -> "RowPartition":
        return cls(np.full(rows, sp2), theta=math.nan, pr_sp2=1.0 if sp2 else 0.0)

    def to_dict(self, layer: str = "layer0") -> dict:
        return {
            "layer": layer,
            "theta": None if math.isnan(self.theta) else self.theta,
            "pr_sp2": self.pr_sp2,
            "assignments": ["SP2" if s else "Fixed" for s in self.is_sp2],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RowPartition":
        tags = d["assignments"]
        bad = set(tags) - {"SP2", "Fixed"}
        if bad:
            raise ValueError(f"unknown row tags {sorted(bad)}")
        theta = d.get("theta")
        return cls(
            np.array([t == "SP2" for t in tags], dtype=bool),
            theta=math.nan if theta is None else float(theta),
            pr_sp2=float(d["pr_sp2"]),
        )

    def to_json(self, layer: str = "layer0") -> str:
        return json.dumps(self.to_dict(layer), sort_keys=True)


def partition_rows(variances, pr_sp2: float) -> RowPartition:
    """Tag the ``round(pr_sp2 * R)`` smallest-variance rows as SP2.

    Equal variances are ordered by row index, lower index first. ``theta`` is
    the midpoint between the last SP2 and first fixed variance (the extreme
    variance when one side is empty); assignment is by rank, so theta only
    describes the split.
    """
    v = np.asarray(variances, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("no rows to partition")
    if not 0.0 <= pr_sp2 <= 1.0:
        raise ValueError(f"pr_sp2 must be in [0, 1], got {pr_sp2}")
    rows = v.size
    k = int(math.floor(pr_sp2 * rows + 0.5))
    order = np.lexsort((np.arange(rows), v))
    is_sp2 = np.zeros(rows, dtype=bool)
    is_sp2[order[:k]] = True
    s = v[order]
    if k == 0:
        theta = float(s[0])
    elif k == rows:
        theta = float(s[-1])
    else:
        theta = float((s[k - 1] + s[k]) / 2)
    return RowPartition(is_sp2, theta, float(pr_sp2))


def partition_layer(w, pr_sp2: float) -> RowPartition:
    return partition_rows(row_variance(w), pr_sp2)
