"""Baseline, self-program, guided, and transfer evaluation plus reports."""

from __future__ import annotations

import dataclasses
import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .backend import (
    COMPRESS_MAX_TOKENS,
    DEFAULT_MAX_TOKENS,
    ChatBackend,
    CompletionRequest,
    FinishReason,
)
from .grading import GradeResult, accuracy, format_accuracy, grade
from .model import (
    REPORTS_DIR,
    EvalMode,
    EvalReport,
    Program,
    Sample,
    SampleResult,
    SplitName,
    Task,
    load_checkpoint,
)
from .prompts import (
    PromptBundle,
    render_guided_inference,
    render_program_compression,
    render_self_program,
)

log = logging.getLogger(__name__)

FEW_SHOT_SELF_PROGRAM_SAMPLES = 4


def guided_predictions(
    samples: list[Sample],
    program: Program,
    task: Task,
    backend: ChatBackend,
    max_concurrency: int = 8,
    temperature: float = 0.0,
    bundle: PromptBundle = PromptBundle(),
) -> list[tuple[Sample, str, GradeResult]]:
    """One guided completion per sample, results in sample order.

    Completions fan out across threads; a backend error on any sample
    propagates so callers never commit partial results.
    """

    def run_one(sample: Sample) -> str:
        request = CompletionRequest(
            model=backend.model,
            user=render_guided_inference(task, program, sample, bundle),
            temperature=temperature,
            max_tokens=DEFAULT_MAX_TOKENS,
        )
        response = backend.complete(request)
        if response.finish_reason is FinishReason.LENGTH:
            log.warning("completion truncated for sample %s; grading the partial output", sample.id)
        return response.text

    if not samples:
        return []
    workers = min(max_concurrency, len(samples))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outputs = list(pool.map(run_one, samples))
    return [
        (sample, output, grade(output, sample.answer, task.answer_kind))
        for sample, output in zip(samples, outputs)
    ]


def evaluate(
    task: Task,
    samples: list[Sample],
    program: Program,
    backend: ChatBackend,
    mode: EvalMode = EvalMode.BASELINE,
    split: SplitName = SplitName.TEST,
    max_concurrency: int = 8,
    bundle: PromptBundle = PromptBundle(),
    program_source_model: str | None = None,
) -> EvalReport:
    """Guided inference over a split at temperature 0, graded per sample."""
    if not samples:
        raise ValueError("cannot evaluate an empty sample list")
    rows = guided_predictions(
        samples, program, task, backend, max_concurrency=max_concurrency, bundle=bundle
    )
    per_sample = tuple(
        SampleResult(id=s.id, extracted=g.extracted, correct=g.correct, output=out)
        for s, out, g in rows
    )
    return EvalReport(
        task=task.name,
        mode=mode,
        backend_model=backend.model,
        split=split,
        accuracy=accuracy([g for _, _, g in rows]),
        n=len(per_sample),
        per_sample=per_sample,
        program_source_model=program_source_model,
    )


def run_self_program(
    task: Task,
    samples: list[Sample],
    backend: ChatBackend,
    few_shot: bool = False,
    train_samples: list[Sample] | None = None,
    seed: int = 0,
    max_concurrency: int = 8,
    bundle: PromptBundle = PromptBundle(),
) -> tuple[Program, EvalReport]:
    """Self-generated program evaluation.

    Zero-shot: each test sample gets its own generated program, then one
    guided completion (two backend calls per sample); the per-sample
    programs are kept on the report rows. Few-shot: four seeded training
    samples produce four programs that are concatenated, compressed once,
    and reused for every test sample.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty sample list")

    def generate_program_text(sample: Sample) -> str:
        request = CompletionRequest(
            model=backend.model,
            user=render_self_program(sample, bundle),
            temperature=0.0,
            max_tokens=DEFAULT_MAX_TOKENS,
        )
        return backend.complete(request).text.strip()

    if few_shot:
        if not train_samples or len(train_samples) < FEW_SHOT_SELF_PROGRAM_SAMPLES:
            raise ValueError(
                f"few-shot self-program needs at least {FEW_SHOT_SELF_PROGRAM_SAMPLES} training samples"
            )
        picked = random.Random(seed).sample(train_samples, FEW_SHOT_SELF_PROGRAM_SAMPLES)
        blocks = tuple(generate_program_text(s) for s in picked)
        concatenated = Program(blocks=blocks, origin_model=backend.model)
        compress_req = CompletionRequest(
            model=backend.model,
            user=render_program_compression(concatenated, task.max_solutions, bundle),
            temperature=0.6,
            max_tokens=COMPRESS_MAX_TOKENS,
        )
        compressed = backend.complete(compress_req).text.strip()
        program = Program(blocks=(compressed,), origin_model=backend.model)
        report = evaluate(
            task,
            samples,
            program,
            backend,
            mode=EvalMode.SELF_PROGRAM,
            max_concurrency=max_concurrency,
            bundle=bundle,
        )
        report = dataclasses.replace(report, program_text=program.rendered)
        return program, report

    workers = min(max_concurrency, len(samples))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        program_texts = list(pool.map(generate_program_text, samples))

    def run_one(pair: tuple[Sample, str]) -> str:
        sample, text = pair
        program = Program(blocks=(text,) if text else (), origin_model=backend.model)
        request = CompletionRequest(
            model=backend.model,
            user=render_guided_inference(task, program, sample, bundle),
            temperature=0.0,
            max_tokens=DEFAULT_MAX_TOKENS,
        )
        return backend.complete(request).text

    with ThreadPoolExecutor(max_workers=workers) as pool:
        outputs = list(pool.map(run_one, zip(samples, program_texts)))

    grades = [grade(out, s.answer, task.answer_kind) for s, out in zip(samples, outputs)]
    per_sample = tuple(
        SampleResult(id=s.id, extracted=g.extracted, correct=g.correct, output=out, program=prog)
        for s, out, g, prog in zip(samples, outputs, grades, program_texts)
    )
    report = EvalReport(
        task=task.name,
        mode=EvalMode.SELF_PROGRAM,
        backend_model=backend.model,
        split=SplitName.TEST,
        accuracy=accuracy(grades),
        n=len(per_sample),
        per_sample=per_sample,
    )
    # Per-sample programs ride along on the rows; there is no single program.
    return Program(origin_model=backend.model), report


def run_transfer(
    program_checkpoint: str | Path,
    target_backend: ChatBackend,
    task: Task,
    samples: list[Sample],
    split: SplitName = SplitName.TEST,
    max_concurrency: int = 8,
    bundle: PromptBundle = PromptBundle(),
) -> EvalReport:
    """Evaluate a program learned against one model on a different backend."""
    state = load_checkpoint(program_checkpoint)
    if state.program.is_empty:
        raise ValueError(
            f"checkpoint {program_checkpoint} holds an empty program; nothing to transfer"
        )
    return evaluate(
        task,
        samples,
        state.program,
        target_backend,
        mode=EvalMode.TRANSFER,
        split=split,
        max_concurrency=max_concurrency,
        bundle=bundle,
        program_source_model=state.program.origin_model,
    )


@dataclass(frozen=True)
class RunComparison:
    """Accuracy rows for one task, mode by mode."""

    task: str
    rows: tuple[tuple[str, str, float, int], ...]  # (mode, model, accuracy, n)

    def deltas(self) -> tuple[float, ...]:
        """Accuracy difference of each row against the first (baseline) row."""
        if len(self.rows) < 2:
            return ()
        base = self.rows[0][2]
        return tuple(row[2] - base for row in self.rows[1:])


def report_path(run_dir: str | Path, task: str, mode: str) -> Path:
    return Path(run_dir) / REPORTS_DIR / f"{task}-{mode}.json"


def save_report(report: EvalReport, run_dir: str | Path) -> Path:
    """Write one machine-readable report under ``run_dir``/reports."""
    path = report_path(run_dir, report.task, report.mode.value)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "task": report.task,
        "mode": report.mode.value,
        "backend_model": report.backend_model,
        "program_source_model": report.program_source_model,
        "program_text": report.program_text,
        "split": report.split.value,
        "accuracy": report.accuracy,
        "n": report.n,
        "per_sample": [
            {
                "id": r.id,
                "extracted": r.extracted,
                "correct": r.correct,
                "output": r.output,
                **({"program": r.program} if r.program else {}),
            }
            for r in report.per_sample
        ],
    }
    path.write_text(json.dumps(record, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return path


def load_report(path: str | Path) -> EvalReport:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    return EvalReport(
        task=record["task"],
        mode=EvalMode(record["mode"]),
        backend_model=record["backend_model"],
        split=SplitName(record["split"]),
        accuracy=record["accuracy"],
        n=record["n"],
        per_sample=tuple(
            SampleResult(
                id=r["id"],
                extracted=r["extracted"],
                correct=r["correct"],
                output=r.get("output", ""),
                program=r.get("program", ""),
            )
            for r in record["per_sample"]
        ),
        program_source_model=record.get("program_source_model"),
        program_text=record.get("program_text"),
    )


def emit_report(comparisons: list[RunComparison], run_dir: str | Path) -> Path:
    """Write summary.md: one table per task plus an average row, one-decimal accuracies."""
    if not comparisons:
        raise ValueError("nothing to report")
    out_dir = Path(run_dir) / REPORTS_DIR
    out_dir.mkdir(parents=True, exist_ok=True)

    modes: list[str] = []
    for comparison in comparisons:
        for mode, _, _, _ in comparison.rows:
            if mode not in modes:
                modes.append(mode)
    with_deltas = len(modes) > 1

    lines = ["# Results", ""]
    header = ["Task"] + modes
    if with_deltas:
        header += [f"delta({m})" for m in modes[1:]]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))

    per_mode_values: dict[str, list[float]] = {m: [] for m in modes}
    for comparison in comparisons:
        by_mode = {mode: acc for mode, _, acc, _ in comparison.rows}
        cells = [comparison.task]
        for mode in modes:
            if mode in by_mode:
                cells.append(format_accuracy(by_mode[mode]))
                per_mode_values[mode].append(by_mode[mode])
            else:
                cells.append("-")
        if with_deltas:
            base = by_mode.get(modes[0])
            for mode in modes[1:]:
                if base is not None and mode in by_mode:
                    cells.append(f"{by_mode[mode] - base:+.1f}")
                else:
                    cells.append("-")
        lines.append("| " + " | ".join(cells) + " |")

    avg_cells = ["Avg"]
    for mode in modes:
        values = per_mode_values[mode]
        avg_cells.append(format_accuracy(sum(values) / len(values)) if values else "-")
    if with_deltas:
        base_values = per_mode_values[modes[0]]
        base_avg = sum(base_values) / len(base_values) if base_values else None
        for mode in modes[1:]:
            values = per_mode_values[mode]
            if values and base_avg is not None:
                avg_cells.append(f"{sum(values) / len(values) - base_avg:+.1f}")
            else:
                avg_cells.append("-")
    lines.append("| " + " | ".join(avg_cells) + " |")

    path = out_dir / "summary.md"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
