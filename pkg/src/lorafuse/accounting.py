"""Analytic multiply-accumulate counts for composition runs.

Each active branch costs two passes per step (unconditional and
conditional). A full pass costs ``spec.forward_macs()``; a cached pass costs
``spec.forward_macs(skip)``. One-off work such as building merged weights
is not counted.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .numerics import ParameterError

PASSES_PER_STEP = 2


@dataclass(frozen=True)
class MacEntry:
    step: int
    branch: str
    full: bool
    macs: int


@dataclass(frozen=True)
class MacReport:
    method: str
    n: int
    strategy: str
    entries: tuple[MacEntry, ...]

    @property
    def total(self) -> int:
        return sum(e.macs for e in self.entries)

    @property
    def full_macs(self) -> int:
        return sum(e.macs for e in self.entries if e.full)

    @property
    def partial_macs(self) -> int:
        return sum(e.macs for e in self.entries if not e.full)

    def per_step(self) -> list[int]:
        out: dict[int, int] = {}
        for e in self.entries:
            out[e.step] = out.get(e.step, 0) + e.macs
        return [out[k] for k in sorted(out)]

    def per_branch(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.branch] = out.get(e.branch, 0) + e.macs
        return dict(sorted(out.items()))

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "N": self.n,
            "strategy": self.strategy,
            "total": self.total,
            "full": self.full_macs,
            "partial": self.partial_macs,
            "per_branch": self.per_branch(),
            "per_step": self.per_step(),
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def count_macs(spec, trace, plan) -> MacReport:
    """Sum analytic pass costs over a trace, checking its cache flags against ``plan``."""
    if trace.T != plan.T:
        raise ParameterError(f"trace has T={trace.T} but plan has T={plan.T}")
    full_cost = spec.forward_macs()
    part_cost = spec.forward_macs(trace.skip)
    entries = []
    for e in trace.steps:
        for b, active, full in zip(trace.branches, e.active, e.full):
            if not active:
                continue
            expected = plan.is_full(e.step) or (trace.dominant_full and b == e.dominant)
            if full != expected:
                raise ParameterError(f"step {e.step}, branch {b}: full={full} disagrees with the plan")
            cost = full_cost if full else part_cost
            entries.append(MacEntry(e.step, b, full, PASSES_PER_STEP * cost))
    n = 0 if trace.method == "naive" else len(trace.branches)
    return MacReport(trace.method, n, plan.strategy, tuple(entries))


def mac_table(reports) -> dict:
    """Nest report totals as ``method -> N -> strategy -> total``."""
    table: dict = {}
    for r in reports:
        table.setdefault(r.method, {}).setdefault(str(r.n), {})[r.strategy] = r.total
    return table


def write_mac_table(path, reports) -> None:
    with open(path, "w") as fh:
        json.dump(mac_table(reports), fh, indent=2, sort_keys=True)
        fh.write("\n")
