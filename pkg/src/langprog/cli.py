"""Command-line entry points: train, eval, self-program, transfer, report,
data split, cache stats.

Every run directory gets a fully materialized ``config.json`` so any
command can be reproduced (or resumed) from the directory alone. Secrets
travel only through the environment (LP_API_KEY, LP_BASE_URL), never flags.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .audit import AuditError, audit_ok, replay_audit
from .backend import (
    BackendError,
    CachingBackend,
    ChatBackend,
    DiskCache,
    HttpBackend,
    MockBackend,
    MockScript,
)
from .data import DataError, Dataset, load_dataset, split_dataset
from .evaluation import (
    RunComparison,
    emit_report,
    evaluate,
    load_report,
    run_self_program,
    run_transfer,
    save_report,
)
from .grading import format_accuracy
from .model import (
    REPORTS_DIR,
    AnswerKind,
    CheckpointError,
    Demo,
    EvalMode,
    Program,
    PromptMode,
    Sample,
    SplitName,
    Task,
    TrainerConfig,
    WrongExample,
    load_checkpoint,
)
from .prompts import (
    render_guided_inference,
    render_program_compression,
    render_revision,
    render_revision_compression,
    render_self_program,
)
from .trainer import TrainAbort, prepare_splits, train

CONFIG_FILE = "config.json"

DEFAULT_LIVE_MODEL = "gpt-3.5-turbo"
DEFAULT_MOCK_MODEL = "mock-model"


class CliError(click.ClickException):
    """Domain failure: exit code 1 (usage errors exit 2 via click)."""

    exit_code = 1


def load_task(path: str | Path) -> Task:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    try:
        demos: tuple[Demo, ...] = ()
        if raw.get("demos"):
            demo_path = (path.parent / raw["demos"]).resolve()
            demos = tuple(
                Demo(question=r["question"], solution=r["solution"], answer=r["answer"])
                for r in _read_jsonl(demo_path)
            )
        return Task(
            name=raw["name"],
            answer_kind=AnswerKind(raw["answer_kind"]),
            prompt_mode=PromptMode(raw.get("prompt_mode", "zero_shot_cot")),
            demos=demos,
            max_solutions=raw.get("max_solutions", 5),
            split_ratio=tuple(raw.get("split_ratio", (3, 1))),
        )
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid task config {path}: {exc}") from exc


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def trainer_config_from(task_path: str | Path, overrides: dict) -> TrainerConfig:
    with open(task_path, "rb") as fh:
        raw = tomllib.load(fh)
    settings = dict(raw.get("trainer", {}))
    settings.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainerConfig(**settings)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid trainer configuration: {exc}") from exc


def build_backend(kind: str, model: str | None, script: str | None, cache_dir: str | None) -> ChatBackend:
    if kind == "mock":
        if not script:
            raise CliError("mock backend needs --script")
        backend: ChatBackend = MockBackend(
            MockScript.from_file(script), model=model or DEFAULT_MOCK_MODEL
        )
    else:
        backend = HttpBackend(model=model or DEFAULT_LIVE_MODEL)
    if cache_dir:
        backend = CachingBackend(backend, DiskCache(cache_dir))
    return backend


def write_run_config(run_dir: Path, config: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_FILE).write_text(
        json.dumps(config, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_run_config(run_dir: Path) -> dict:
    path = run_dir / CONFIG_FILE
    if not path.exists():
        raise CliError(f"no materialized config at {path}; was this directory created by lp?")
    return json.loads(path.read_text(encoding="utf-8"))


def _abs(value: str | None) -> str | None:
    return str(Path(value).resolve()) if value else None


@click.group()
@click.option("--quiet", is_flag=True, help="Suppress progress log lines.")
def main(quiet: bool) -> None:
    """Learn natural-language programs from task data and evaluate them."""
    level = logging.WARNING if quiet else logging.INFO
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(message)s"))
    package_log = logging.getLogger("langprog")
    package_log.setLevel(level)
    if not package_log.handlers:
        package_log.addHandler(handler)


@main.command(name="train")
@click.option("--task", "task_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", type=click.Path(exists=True, dir_okay=False), help="Single dataset; split by the task ratio.")
@click.option("--train-data", type=click.Path(exists=True, dir_okay=False), help="Pre-split training file.")
@click.option("--test-data", type=click.Path(exists=True, dir_okay=False), help="Pre-split test file.")
@click.option("--backend", "backend_kind", type=click.Choice(["live", "mock"]), default="live")
@click.option("--model", default=None, help="Backend model name.")
@click.option("--script", type=click.Path(exists=True, dir_okay=False), help="Mock script (JSON rules).")
@click.option("--out", "run_dir", type=click.Path(file_okay=False), help="Run directory.")
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False), help="Response cache directory.")
@click.option("--resume", "resume_dir", type=click.Path(exists=True, file_okay=False), help="Resume a checkpointed run.")
@click.option("--dry-run", is_flag=True, help="Print the first prompt of each phase and exit.")
@click.option("--epochs", type=int)
@click.option("--batch-size", type=int)
@click.option("--validation-multiplier", type=int)
@click.option("--wrong-samples", "wrong_sample_count", type=int)
@click.option("--candidates", "candidate_count", type=int)
@click.option("--threshold", "improvement_threshold", type=float)
@click.option("--stagnation-limit", type=int)
@click.option("--max-concurrency", type=int)
@click.option("--seed", "rng_seed", type=int)
def cmd_train(
    task_path,
    data,
    train_data,
    test_data,
    backend_kind,
    model,
    script,
    run_dir,
    cache_dir,
    resume_dir,
    dry_run,
    **overrides,
) -> None:
    """Run the learning loop to its stop criterion."""
    if resume_dir:
        config = read_run_config(Path(resume_dir))
        run_path = Path(resume_dir)
        resume = True
    else:
        if not task_path:
            raise click.UsageError("--task is required (unless resuming)")
        if not run_dir and not dry_run:
            raise click.UsageError("--out is required (unless resuming)")
        if not data and not train_data:
            raise click.UsageError("provide --data or --train-data")
        trainer = trainer_config_from(task_path, overrides)
        config = {
            "task_path": _abs(task_path),
            "data": _abs(data),
            "train_data": _abs(train_data),
            "test_data": _abs(test_data),
            "backend": backend_kind,
            "model": model or (DEFAULT_MOCK_MODEL if backend_kind == "mock" else DEFAULT_LIVE_MODEL),
            "script": _abs(script),
            "cache_dir": _abs(cache_dir),
            "run_dir": _abs(run_dir),
            "trainer": dataclasses.asdict(trainer),
        }
        run_path = Path(run_dir) if run_dir else Path(".")
        resume = False

    task = load_task(config["task_path"])
    trainer_config = TrainerConfig(**config["trainer"])
    try:
        if config["data"]:
            dataset = load_dataset(config["data"], task)
            test_dataset = None
        else:
            dataset = load_dataset(config["train_data"], task)
            test_dataset = load_dataset(config["test_data"], task) if config["test_data"] else None
    except DataError as exc:
        raise CliError(str(exc)) from exc

    if dry_run:
        _print_dry_run(task, dataset)
        return

    if not resume:
        write_run_config(run_path, config)

    backend = build_backend(config["backend"], config["model"], config["script"], config["cache_dir"])
    try:
        state = train(
            task,
            dataset,
            trainer_config,
            backend,
            run_path,
            test_dataset=test_dataset,
            resume=resume,
        )
    except TrainAbort as exc:
        raise CliError(str(exc)) from exc
    except (DataError, CheckpointError, BackendError) as exc:
        raise CliError(str(exc)) from exc

    click.echo(f"stopped: {state.stop_reason.value} after {state.step} batches")
    click.echo(f"final validation accuracy: {format_accuracy(state.recorded_perfs[-1])}")

    plan, pool = prepare_splits(dataset, trainer_config, test_dataset)
    if plan.test_ids:
        test_samples = [pool[i] for i in plan.test_ids]
        report = evaluate(
            task,
            test_samples,
            state.program,
            backend,
            mode=EvalMode.LP,
            split=SplitName.TEST,
            max_concurrency=trainer_config.max_concurrency,
        )
        save_report(report, run_path)
        click.echo(f"test accuracy: {format_accuracy(report.accuracy)} (n={report.n})")
    click.echo(f"run directory: {run_path}")


def _print_dry_run(task: Task, dataset: Dataset) -> None:
    sample = dataset.samples[0]
    placeholder_program = Program(blocks=("<program block>",))
    wrong = [WrongExample(sample=sample, prediction="<wrong output>", extracted="<extracted>")]
    sections = [
        ("guided inference", render_guided_inference(task, Program(), sample)),
        ("self-program", render_self_program(sample)),
        ("revision", render_revision(wrong, Program())),
        ("revision compression", render_revision_compression("<revision text>", task.max_solutions)),
        ("program compression", render_program_compression(placeholder_program, task.max_solutions)),
    ]
    for name, text in sections:
        click.echo(f"--- {name} ---")
        click.echo(text)
        click.echo()


@main.command(name="eval")
@click.option("--task", "task_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--backend", "backend_kind", type=click.Choice(["live", "mock"]), default="live")
@click.option("--model", default=None)
@click.option("--script", type=click.Path(exists=True, dir_okay=False))
@click.option("--program", "program_dir", type=click.Path(exists=True, file_okay=False), help="Checkpoint directory with a learned program.")
@click.option("--out", "run_dir", type=click.Path(file_okay=False), required=True)
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False))
@click.option("--max-concurrency", type=int, default=8)
def cmd_eval(task_path, data, backend_kind, model, script, program_dir, run_dir, cache_dir, max_concurrency) -> None:
    """Evaluate a dataset file, guided by a learned program or bare (baseline)."""
    task = load_task(task_path)
    try:
        dataset = load_dataset(data, task)
    except DataError as exc:
        raise CliError(str(exc)) from exc
    program = Program()
    mode = EvalMode.BASELINE
    if program_dir:
        program = load_checkpoint(program_dir).program
        mode = EvalMode.LP
    backend = build_backend(backend_kind, model, script, cache_dir)
    run_path = Path(run_dir)
    write_run_config(
        run_path,
        {
            "command": "eval",
            "task_path": _abs(task_path),
            "data": _abs(data),
            "backend": backend_kind,
            "model": backend.model,
            "script": _abs(script),
            "program": _abs(program_dir),
            "cache_dir": _abs(cache_dir),
            "run_dir": _abs(run_dir),
        },
    )
    try:
        report = evaluate(
            task, list(dataset.samples), program, backend, mode=mode, max_concurrency=max_concurrency
        )
    except BackendError as exc:
        raise CliError(str(exc)) from exc
    save_report(report, run_path)
    click.echo(f"{task.name} {mode.value}: {format_accuracy(report.accuracy)} (n={report.n})")


@main.command(name="self-program")
@click.option("--task", "task_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--few-shot", is_flag=True)
@click.option("--train-data", type=click.Path(exists=True, dir_okay=False))
@click.option("--backend", "backend_kind", type=click.Choice(["live", "mock"]), default="live")
@click.option("--model", default=None)
@click.option("--script", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "run_dir", type=click.Path(file_okay=False), required=True)
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0)
@click.option("--max-concurrency", type=int, default=8)
def cmd_self_program(
    task_path, data, few_shot, train_data, backend_kind, model, script, run_dir, cache_dir, seed, max_concurrency
) -> None:
    """Generate programs with the model itself and evaluate them."""
    task = load_task(task_path)
    try:
        dataset = load_dataset(data, task)
        train_samples: list[Sample] | None = None
        if few_shot:
            if not train_data:
                raise CliError("--few-shot needs --train-data")
            train_samples = list(load_dataset(train_data, task).samples)
    except DataError as exc:
        raise CliError(str(exc)) from exc
    backend = build_backend(backend_kind, model, script, cache_dir)
    run_path = Path(run_dir)
    write_run_config(
        run_path,
        {
            "command": "self-program",
            "task_path": _abs(task_path),
            "data": _abs(data),
            "train_data": _abs(train_data),
            "few_shot": few_shot,
            "backend": backend_kind,
            "model": backend.model,
            "script": _abs(script),
            "cache_dir": _abs(cache_dir),
            "run_dir": _abs(run_dir),
            "seed": seed,
        },
    )
    try:
        _, report = run_self_program(
            task,
            list(dataset.samples),
            backend,
            few_shot=few_shot,
            train_samples=train_samples,
            seed=seed,
            max_concurrency=max_concurrency,
        )
    except (BackendError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    save_report(report, run_path)
    click.echo(f"{task.name} self_program: {format_accuracy(report.accuracy)} (n={report.n})")


@main.command(name="transfer")
@click.option("--program", "program_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--model", required=True, help="Target backend model.")
@click.option("--task", "task_path", type=click.Path(exists=True, dir_okay=False), help="Defaults to the source run's task.")
@click.option("--data", type=click.Path(exists=True, dir_okay=False), help="Defaults to the source run's dataset.")
@click.option("--backend", "backend_kind", type=click.Choice(["live", "mock"]), default="live")
@click.option("--script", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "run_dir", type=click.Path(file_okay=False), help="Defaults to the source run directory.")
@click.option("--cache", "cache_dir", type=click.Path(file_okay=False))
@click.option("--max-concurrency", type=int, default=8)
def cmd_transfer(program_dir, model, task_path, data, backend_kind, script, run_dir, cache_dir, max_concurrency) -> None:
    """Evaluate a learned program on a different backend model."""
    source = Path(program_dir)
    source_config = None
    if not task_path or not data:
        source_config = read_run_config(source)
        task_path = task_path or source_config["task_path"]
    task = load_task(task_path)
    try:
        if data:
            samples = list(load_dataset(data, task).samples)
        else:
            samples = _transfer_samples_from_source(source_config, task)
    except DataError as exc:
        raise CliError(str(exc)) from exc
    backend = build_backend(backend_kind, model, script, cache_dir)
    run_path = Path(run_dir) if run_dir else source
    if run_path != source:
        write_run_config(
            run_path,
            {
                "command": "transfer",
                "program": _abs(str(source)),
                "task_path": _abs(task_path),
                "data": _abs(data),
                "backend": backend_kind,
                "model": model,
                "script": _abs(script),
                "cache_dir": _abs(cache_dir),
                "run_dir": _abs(str(run_path)),
            },
        )
    try:
        report = run_transfer(source, backend, task, samples, max_concurrency=max_concurrency)
    except (ValueError, CheckpointError, BackendError) as exc:
        raise CliError(str(exc)) from exc
    save_report(report, run_path)
    click.echo(
        f"{task.name} transfer: {format_accuracy(report.accuracy)} (n={report.n}) "
        f"[program from {report.program_source_model} -> {report.backend_model}]"
    )


def _transfer_samples_from_source(source_config: dict, task: Task) -> list[Sample]:
    """Default transfer set: the source run's test side."""
    if source_config.get("test_data"):
        return list(load_dataset(source_config["test_data"], task).samples)
    if source_config.get("data") and source_config.get("trainer"):
        dataset = load_dataset(source_config["data"], task)
        plan, pool = prepare_splits(dataset, TrainerConfig(**source_config["trainer"]))
        return [pool[i] for i in plan.test_ids]
    raise CliError("no dataset recorded in the source run; pass --data")


@main.command(name="report")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def cmd_report(run_dir) -> None:
    """Summarize all stored reports of a run; re-audit its history."""
    run_path = Path(run_dir)
    report_files = sorted((run_path / REPORTS_DIR).glob("*.json")) if (run_path / REPORTS_DIR).exists() else []
    if not report_files:
        raise CliError(f"no reports under {run_path / REPORTS_DIR}")
    by_task: dict[str, list] = {}
    for path in report_files:
        report = load_report(path)
        by_task.setdefault(report.task, []).append(report)
    comparisons = []
    for task_name, reports in sorted(by_task.items()):
        rows = tuple(
            (r.mode.value, r.backend_model, r.accuracy, r.n)
            for r in sorted(reports, key=lambda r: r.mode.value)
        )
        comparisons.append(RunComparison(task=task_name, rows=rows))
    summary = emit_report(comparisons, run_path)
    click.echo(summary.read_text().rstrip())

    if (run_path / "history.jsonl").exists():
        try:
            checks = replay_audit(run_path)
        except AuditError as exc:
            raise CliError(f"replay audit failed: {exc}") from exc
        status = "OK" if audit_ok(checks) else "FAILED"
        noun = "revision" if len(checks) == 1 else "revisions"
        click.echo(f"replay audit: {status} ({len(checks)} accepted {noun} checked)")
        if not audit_ok(checks):
            raise CliError("replay audit found gate violations")


@main.group(name="data")
def cmd_data() -> None:
    """Dataset utilities."""


@cmd_data.command(name="split")
@click.option("--in", "input_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ratio", default="3:1", help="train:test ratio, e.g. 3:1")
@click.option("--seed", type=int, default=0)
@click.option("--task", "task_path", type=click.Path(exists=True, dir_okay=False), help="Task config for label validation.")
def cmd_data_split(input_path, ratio, seed, task_path) -> None:
    """Split one JSONL dataset into train/test files."""
    try:
        parts = ratio.split(":")
        ratio_pair = (int(parts[0]), int(parts[1]))
    except (ValueError, IndexError):
        raise click.UsageError(f"bad ratio {ratio!r}; expected like 3:1")
    task = load_task(task_path) if task_path else Task(name="split", answer_kind=AnswerKind.FREE_TEXT)
    try:
        dataset = load_dataset(input_path, task)
        plan = split_dataset(dataset, ratio_pair, seed)
    except DataError as exc:
        raise CliError(str(exc)) from exc

    src = Path(input_path)
    by_id = {s.id: s for s in dataset.samples}
    for side, ids in (("train", plan.train_ids), ("test", plan.test_ids)):
        out_path = src.with_name(f"{src.stem}.{side}.jsonl")
        lines = []
        for sample_id in ids:
            s = by_id[sample_id]
            record = {"id": s.id, "question": s.question, "answer": s.answer}
            if s.choices:
                record["choices"] = list(s.choices)
            if s.meta:
                record["meta"] = dict(s.meta)
            lines.append(json.dumps(record, ensure_ascii=False))
        out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        click.echo(f"{side}: {len(ids)} samples -> {out_path}")


@main.group(name="cache")
def cmd_cache() -> None:
    """Response cache utilities."""


@cmd_cache.command(name="stats")
@click.option("--cache", "cache_dir", type=click.Path(exists=True, file_okay=False), required=True)
def cmd_cache_stats(cache_dir) -> None:
    """Print entry count and total size of a response cache."""
    count, size = DiskCache(cache_dir).stats()
    click.echo(f"{count} entries, {size} bytes")


if __name__ == "__main__":
    sys.exit(main())
