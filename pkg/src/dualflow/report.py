"""Flat residual reports: named statistics with thresholds and pass flags."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable


@dataclass
class Statistic:
    name: str
    value: float
    threshold: float
    stderr: float | None = None
    note: str = ""

    @property
    def passed(self) -> bool:
        return bool(math.isfinite(self.value) and self.value <= self.threshold)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{self.name} = {self.value:.6g} <= {self.threshold:.6g} {flag}"


@dataclass
class ResidualReport:
    """A group of statistics; ``passed`` iff every statistic is within threshold."""

    name: str
    stats: list[Statistic] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict, repr=False)  # grid diagnostics, not serialized

    def add(self, name: str, value: float, threshold: float, stderr: float | None = None,
            note: str = "") -> Statistic:
        st = Statistic(name, float(value), float(threshold), None if stderr is None else float(stderr), note)
        self.stats.append(st)
        return st

    def add_se_test(self, name: str, estimate: float, stderr: float, target: float = 0.0,
                    n_se: float = 3.0, note: str = "") -> Statistic:
        """Record ``|estimate - target| <= n_se * stderr``."""
        return self.add(name, abs(estimate - target), n_se * stderr, stderr, note)

    def extend(self, other: "ResidualReport", prefix: str = "") -> None:
        for st in other.stats:
            self.stats.append(Statistic(prefix + st.name, st.value, st.threshold, st.stderr, st.note))

    def __getitem__(self, name: str) -> Statistic:
        for st in self.stats:
            if st.name == name:
                return st
        raise KeyError(name)

    @property
    def passed(self) -> bool:
        return all(st.passed for st in self.stats)

    @property
    def failures(self) -> list[str]:
        return [st.name for st in self.stats if not st.passed]

    def scaled(self, factor: float) -> "ResidualReport":
        """Copy with every threshold multiplied by ``factor``."""
        out = ResidualReport(self.name, metadata=dict(self.metadata), arrays=dict(self.arrays))
        for st in self.stats:
            out.stats.append(Statistic(st.name, st.value, st.threshold * factor, st.stderr, st.note))
        return out

    def to_record(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "metadata": self.metadata,
            "statistics": [
                {"name": s.name, "value": s.value, "stderr": s.stderr, "threshold": s.threshold,
                 "passed": s.passed, "note": s.note}
                for s in self.stats
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ResidualReport":
        rep = cls(rec["name"], metadata=rec.get("metadata", {}))
        for s in rec["statistics"]:
            rep.stats.append(Statistic(s["name"], s["value"], s["threshold"], s.get("stderr"), s.get("note", "")))
        return rep

    def lines(self) -> Iterable[str]:
        return (st.line() for st in self.stats)
