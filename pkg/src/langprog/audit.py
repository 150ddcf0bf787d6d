"""Independent replay audit of a run's acceptance decisions.

Reads only ``history.jsonl`` and re-derives the acceptance gate for every
committed revision: its validation accuracy must beat the recent average
of previously recorded accuracies by the improvement threshold. This is a
separate arithmetic path from the trainer, so a bookkeeping bug in either
side shows up as a failed audit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .model import read_history


class AuditError(Exception):
    pass


@dataclass(frozen=True)
class GateCheck:
    step: int
    val_accuracy: float
    recent_average: float
    required: float
    ok: bool


def replay_audit(
    run_dir: str | os.PathLike[str],
    improvement_threshold: float = 1.0,
    recent_window: int = 3,
) -> list[GateCheck]:
    """Re-derive every revision's acceptance gate from the history log."""
    records = read_history(run_dir)
    if not records:
        raise AuditError(f"no history records under {run_dir}")
    if records[0].get("kind") != "baseline":
        raise AuditError("history must start with the baseline record")

    perfs: list[float] = []
    checks: list[GateCheck] = []
    for record in records:
        kind = record.get("kind", "revision")
        acc = float(record["val_accuracy"])
        if kind == "baseline":
            perfs.append(acc)
            continue
        if kind == "revision":
            window = perfs[-recent_window:]
            avg = sum(window) / len(window)
            required = avg + improvement_threshold
            checks.append(
                GateCheck(
                    step=int(record["step"]),
                    val_accuracy=acc,
                    recent_average=avg,
                    required=required,
                    ok=acc >= required,
                )
            )
        perfs.append(acc)
    return checks


def audit_ok(checks: list[GateCheck]) -> bool:
    return all(c.ok for c in checks)
