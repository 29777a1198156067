"""Sweep result records shared by the orchestration and reporting layers."""

from __future__ import annotations

from dataclasses import dataclass, field

from .trainer import SummaryStats

SWEEP_HEADER = ["protocol", "param", "seed", "top1_mean", "top1_std", "top5_mean", "top5_std", "status"]


@dataclass
class SweepRow:
    protocol: str
    param: str
    seed: int
    stats: SummaryStats | None
    run_dir: str = ""
    status: str = "complete"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "complete" and self.stats is not None


@dataclass
class SweepResult:
    sweep_id: str
    rows: list[SweepRow] = field(default_factory=list)
    baselines: list[SweepRow] = field(default_factory=list)

    def all_rows(self) -> list[SweepRow]:
        return self.rows + self.baselines

    @property
    def failed(self) -> list[SweepRow]:
        return [r for r in self.all_rows() if not r.ok]

    def row(self, protocol: str, param) -> SweepRow:
        for r in self.all_rows():
            if r.protocol == protocol and r.param == str(param):
                return r
        raise KeyError((protocol, param))

    def baseline(self, which: str) -> SweepRow:
        return self.row(f"baseline-{which}", "-")


def sweep_to_dict(result: SweepResult) -> dict:
    def row(r: SweepRow):
        return {
            "protocol": r.protocol,
            "param": r.param,
            "seed": r.seed,
            "stats": None if r.stats is None else r.stats.to_dict(),
            "run_dir": r.run_dir,
            "status": r.status,
            "error": r.error,
        }

    return {"sweep_id": result.sweep_id, "rows": [row(r) for r in result.rows], "baselines": [row(r) for r in result.baselines]}


def sweep_from_dict(d: dict) -> SweepResult:
    def row(r):
        stats = None if r["stats"] is None else SummaryStats(**r["stats"])
        return SweepRow(r["protocol"], r["param"], r["seed"], stats, r["run_dir"], r["status"], r["error"])

    return SweepResult(d["sweep_id"], [row(r) for r in d["rows"]], [row(r) for r in d["baselines"]])
