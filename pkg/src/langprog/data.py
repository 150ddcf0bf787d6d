"""Dataset ingestion, deterministic splitting, and batch iteration.

Dataset files are JSONL, one record per line with fields ``id``,
``question``, ``answer``, and optional ``choices``/``meta``. Every label is
self-checked against the task grader at load time so grading problems
surface as load errors naming the line, not as silent zero accuracy later.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path

from .grading import grade
from .model import Sample, Task


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Provenance:
    path: str
    digest: str


@dataclass(frozen=True)
class Dataset:
    task: Task
    samples: tuple[Sample, ...]
    provenance: Provenance

    def by_id(self, sample_id: str) -> Sample:
        for sample in self.samples:
            if sample.id == sample_id:
                return sample
        raise KeyError(sample_id)


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint train/validation/test id sets; train is the batching pool."""

    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    validation_ids: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        groups = (set(self.train_ids), set(self.validation_ids), set(self.test_ids))
        total = sum(len(g) for g in groups)
        if len(set().union(*groups)) != total:
            raise ValueError("train/validation/test ids must be pairwise disjoint")


def load_dataset(path: str | Path, task: Task) -> Dataset:
    """Load and validate a JSONL dataset for ``task``; order-preserving."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    digest = hashlib.sha256(raw).hexdigest()

    samples: list[Sample] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            sample = Sample(
                id=str(record["id"]),
                question=record["question"],
                answer=str(record["answer"]),
                choices=tuple(record["choices"]) if record.get("choices") else None,
                meta={str(k): str(v) for k, v in record.get("meta", {}).items()},
            )
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc}") from exc
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if sample.id in seen:
            raise DataError(
                f"{path}:{lineno}: duplicate id {sample.id!r} (first seen on line {seen[sample.id]})"
            )
        seen[sample.id] = lineno
        try:
            result = grade(sample.answer, sample.answer, task.answer_kind)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        if not result.correct:
            raise DataError(
                f"{path}:{lineno}: label {sample.answer!r} fails the "
                f"{task.answer_kind.value} grader self-check"
            )
        samples.append(sample)

    return Dataset(task=task, samples=tuple(samples), provenance=Provenance(str(path), digest))


def split_dataset(dataset: Dataset, ratio: tuple[int, int], seed: int) -> SplitPlan:
    """Seeded shuffle then contiguous split; train gets ceil(n*a/(a+b))."""
    a, b = ratio
    if a < 1 or b < 1:
        raise DataError("split ratio parts must be positive")
    n = len(dataset.samples)
    if n < a + b:
        raise DataError(f"dataset has {n} samples, too small for a {a}:{b} split")
    ids = [s.id for s in dataset.samples]
    random.Random(seed).shuffle(ids)
    train_n = math.ceil(n * a / (a + b))
    return SplitPlan(train_ids=tuple(ids[:train_n]), test_ids=tuple(ids[train_n:]), seed=seed)


def sample_validation(plan: SplitPlan, size: int, seed: int) -> SplitPlan:
    """Reserve ``size`` validation ids out of the train side, removing them
    from the batching pool; deterministic under ``seed``."""
    if size < 1:
        raise DataError("validation size must be >= 1")
    if len(plan.train_ids) <= size:
        raise DataError(
            f"train split has {len(plan.train_ids)} samples but {size} were requested "
            "for validation; lower validation_multiplier or batch_size"
        )
    chosen = set(random.Random(seed).sample(list(plan.train_ids), size))
    validation = tuple(i for i in plan.train_ids if i in chosen)
    remaining = tuple(i for i in plan.train_ids if i not in chosen)
    return replace(plan, train_ids=remaining, validation_ids=validation)


def make_batches(
    train_ids: tuple[str, ...] | list[str], batch_size: int, epoch: int, seed: int
) -> list[list[str]]:
    """Per-epoch seeded shuffle into batches of ``batch_size`` (last may be short)."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if not train_ids:
        raise DataError("cannot batch an empty train set")
    ids = list(train_ids)
    random.Random(seed ^ epoch).shuffle(ids)
    return [ids[i : i + batch_size] for i in range(0, len(ids), batch_size)]
