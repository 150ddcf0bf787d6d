"""The learning loop: predict, collect errors, revise, verify, update, stop.

One trainer owns the loop. Each batch fans completions out to worker
threads and joins before any state transition, so every checkpoint sits on
a batch boundary and a resumed run replays the remaining batches exactly.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, replace
from pathlib import Path
from statistics import fmean

from .backend import (
    COMPRESS_MAX_TOKENS,
    DEFAULT_MAX_TOKENS,
    BackendError,
    ChatBackend,
    CompletionRequest,
)
from .data import DataError, Dataset, SplitPlan, make_batches, sample_validation, split_dataset
from .evaluation import guided_predictions
from .grading import GradeResult, accuracy
from .model import (
    HISTORY_FILE,
    Program,
    RevisionCandidate,
    Sample,
    StopReason,
    Task,
    TrainerConfig,
    TrainState,
    WrongExample,
    append_history,
    append_revision,
    load_checkpoint,
    rng_state_from_json,
    rng_state_to_json,
    save_checkpoint,
)
from .prompts import (
    PromptBundle,
    render_program_compression,
    render_revision,
    render_revision_compression,
)

log = logging.getLogger(__name__)

EVENTS_FILE = "events.jsonl"

# Seed offsets so one run seed drives every independent random stream.
SPLIT_SEED_OFFSET = 0
VALIDATION_SEED_OFFSET = 1
BATCH_SEED_OFFSET = 2
REVISION_SEED_OFFSET = 3


class TrainAbort(Exception):
    """A recoverable failure; training already checkpointed and can resume."""

    def __init__(self, run_dir: str | Path, cause: Exception):
        super().__init__(
            f"training aborted ({cause}); resume with: lp train --resume {run_dir}"
        )
        self.run_dir = str(run_dir)
        self.cause = cause


@dataclass(frozen=True)
class BatchOutcome:
    step: int
    predictions: tuple[tuple[Sample, str, GradeResult], ...]
    wrong: tuple[WrongExample, ...]
    batch_accuracy: float

    def __post_init__(self) -> None:
        if len(self.wrong) > len(self.predictions):
            raise ValueError("wrong example set cannot exceed the batch size")


class EventLog:
    """Line-delimited progress records under the run directory.

    Records carry no wall-clock timestamps so identical runs produce
    byte-identical logs.
    """

    def __init__(self, run_dir: str | Path):
        self.path = Path(run_dir) / EVENTS_FILE

    def emit(self, **record) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def predict_batch(
    batch: list[Sample],
    program: Program,
    task: Task,
    backend: ChatBackend,
    config: TrainerConfig,
    step: int,
    bundle: PromptBundle = PromptBundle(),
) -> BatchOutcome:
    """Guided inference over one batch; outcomes stay in batch sample order."""
    rows = guided_predictions(
        batch,
        program,
        task,
        backend,
        max_concurrency=config.max_concurrency,
        temperature=config.gen_temperature,
        bundle=bundle,
    )
    predictions = tuple(rows)
    wrong = _wrong_from_predictions(predictions)
    return BatchOutcome(
        step=step,
        predictions=predictions,
        wrong=wrong,
        batch_accuracy=accuracy([g for _, _, g in predictions]),
    )


def _wrong_from_predictions(
    predictions: tuple[tuple[Sample, str, GradeResult], ...],
) -> tuple[WrongExample, ...]:
    return tuple(
        WrongExample(sample=s, prediction=out, extracted=g.extracted)
        for s, out, g in predictions
        if not g.correct
    )


def collect_wrong_examples(outcome: BatchOutcome) -> list[WrongExample]:
    """Exactly the incorrect predictions, each keeping its full output."""
    return list(_wrong_from_predictions(outcome.predictions))


def generate_candidate(
    wrong_set: list[WrongExample],
    program: Program,
    task: Task,
    config: TrainerConfig,
    backend: ChatBackend,
    rng: random.Random,
    bundle: PromptBundle = PromptBundle(),
) -> RevisionCandidate | None:
    """Draw wrong examples, ask for new solutions, then compress them.

    Two backend calls per candidate. Empty completions discard the
    candidate; backend errors propagate to the batch abort path.
    """
    if not wrong_set:
        raise ValueError("cannot generate a revision from an empty wrong set")
    count = min(config.wrong_sample_count, len(wrong_set))
    chosen = rng.sample(wrong_set, count)

    raw = backend.complete(
        CompletionRequest(
            model=backend.model,
            user=render_revision(chosen, program, bundle),
            temperature=config.gen_temperature,
            max_tokens=DEFAULT_MAX_TOKENS,
        )
    ).text.strip()
    if not raw:
        log.info("discarding candidate: empty revision completion")
        return None

    compressed = backend.complete(
        CompletionRequest(
            model=backend.model,
            user=render_revision_compression(raw, task.max_solutions, bundle),
            temperature=config.compress_temperature,
            max_tokens=COMPRESS_MAX_TOKENS,
        )
    ).text.strip()
    if not compressed:
        log.info("discarding candidate: empty compression completion")
        return None

    return RevisionCandidate(
        raw=raw,
        compressed=compressed,
        seed_errors=tuple(w.sample.id for w in chosen),
    )


def verify_candidate(
    candidate: RevisionCandidate,
    program: Program,
    validation_set: list[Sample],
    task: Task,
    backend: ChatBackend,
    config: TrainerConfig,
    bundle: PromptBundle = PromptBundle(),
) -> RevisionCandidate | None:
    """Score the pseudo-updated program on the validation set.

    The real program is never mutated. A backend failure marks the
    candidate unverified (returns None) and excludes it from selection.
    """
    if not validation_set:
        raise ValueError("validation set must be nonempty")
    if not candidate.compressed:
        return None
    pseudo = append_revision(program, candidate.compressed)
    try:
        rows = guided_predictions(
            validation_set,
            pseudo,
            task,
            backend,
            max_concurrency=config.max_concurrency,
            temperature=config.gen_temperature,
            bundle=bundle,
        )
    except BackendError as exc:
        log.warning("candidate verification failed, excluding it: %s", exc)
        return None
    return replace(candidate, val_accuracy=accuracy([g for _, _, g in rows]))


def recent_average(recorded_perfs: tuple[float, ...], window: int) -> float:
    """Mean of the last ``window`` recorded validation accuracies."""
    if not recorded_perfs:
        raise ValueError("recorded performances must be seeded before selection")
    return fmean(recorded_perfs[-window:])


def select_revision(
    candidates: list[RevisionCandidate],
    recorded_perfs: tuple[float, ...],
    config: TrainerConfig,
) -> RevisionCandidate | None:
    """Keep candidates beating the recent average by the threshold, pick the best.

    The acceptance boundary is inclusive: an exact improvement of
    ``improvement_threshold`` points passes. Ties go to the earliest
    generated candidate.
    """
    if not candidates:
        return None
    avg = recent_average(recorded_perfs, config.recent_window)
    best: RevisionCandidate | None = None
    for candidate in candidates:
        if candidate.val_accuracy is None:
            continue
        if candidate.val_accuracy - avg < config.improvement_threshold:
            continue
        if best is None or candidate.val_accuracy > best.val_accuracy:
            best = candidate
    return best


def update_program(
    state: TrainState, accepted: RevisionCandidate, run_dir: str | Path
) -> TrainState:
    """Commit an accepted revision: append block, record accuracy, checkpoint."""
    if accepted.val_accuracy is None:
        raise ValueError("only verified candidates can update the program")
    new_state = replace(
        state,
        program=append_revision(state.program, accepted.compressed),
        recorded_perfs=state.recorded_perfs + (accepted.val_accuracy,),
        stagnant_batches=0,
        updates_since_compression=state.updates_since_compression + 1,
    )
    save_checkpoint(new_state, run_dir)
    append_history(
        run_dir,
        {
            "kind": "revision",
            "step": new_state.step,
            "raw": accepted.raw,
            "compressed": accepted.compressed,
            "val_accuracy": accepted.val_accuracy,
        },
    )
    return new_state


def compress_program(
    state: TrainState,
    task: Task,
    backend: ChatBackend,
    validation_set: list[Sample],
    config: TrainerConfig,
    run_dir: str | Path,
    events: EventLog | None = None,
    bundle: PromptBundle = PromptBundle(),
) -> TrainState:
    """Try to replace the program with a shorter summary of itself.

    Each attempt summarizes at ``compress_temperature`` and re-verifies on
    the validation set; the first summary whose accuracy stays within
    ``compression_tolerance`` of the last recorded accuracy wins. On
    exhaustion the original program is kept and the update counter resets,
    so compression is retried after the next round of updates.
    """
    if state.updates_since_compression < config.compression_every_updates:
        raise ValueError("compression is not armed yet")
    floor = state.recorded_perfs[-1] - config.compression_tolerance

    for attempt in range(1, config.compression_max_attempts + 1):
        try:
            summary = backend.complete(
                CompletionRequest(
                    model=backend.model,
                    user=render_program_compression(state.program, task.max_solutions, bundle),
                    temperature=config.compress_temperature,
                    max_tokens=COMPRESS_MAX_TOKENS,
                )
            ).text.strip()
        except BackendError as exc:
            log.warning("compression attempt %d failed: %s", attempt, exc)
            continue
        if not summary:
            continue
        candidate_program = Program(
            blocks=(summary,),
            origin_model=state.program.origin_model,
            history_len=state.program.history_len,
        )
        try:
            rows = guided_predictions(
                validation_set,
                candidate_program,
                task,
                backend,
                max_concurrency=config.max_concurrency,
                temperature=config.gen_temperature,
                bundle=bundle,
            )
        except BackendError as exc:
            log.warning("compression verification attempt %d failed: %s", attempt, exc)
            continue
        acc = accuracy([g for _, _, g in rows])
        if acc >= floor:
            log.info(
                "compressed program accepted on attempt %d at validation accuracy %.1f",
                attempt,
                acc,
            )
            new_state = replace(
                state,
                program=candidate_program,
                recorded_perfs=state.recorded_perfs + (acc,),
                updates_since_compression=0,
            )
            save_checkpoint(new_state, run_dir)
            append_history(
                run_dir,
                {
                    "kind": "compression",
                    "step": new_state.step,
                    "compressed": summary,
                    "val_accuracy": acc,
                },
            )
            if events:
                events.emit(
                    step=new_state.step,
                    phase="compress",
                    decision="accepted",
                    attempts=attempt,
                    val_accuracy=acc,
                )
            return new_state
        log.info("compression attempt %d dropped accuracy to %.1f (floor %.1f)", attempt, acc, floor)

    new_state = replace(state, updates_since_compression=0)
    save_checkpoint(new_state, run_dir)
    if events:
        events.emit(
            step=new_state.step,
            phase="compress",
            decision="kept_original",
            attempts=config.compression_max_attempts,
        )
    return new_state


def should_stop(state: TrainState, config: TrainerConfig) -> tuple[bool, StopReason | None]:
    if state.stagnant_batches >= config.stagnation_limit:
        return True, StopReason.STAGNATION
    if state.epoch >= config.epochs:
        return True, StopReason.EPOCHS_EXHAUSTED
    return False, None


def prepare_splits(
    dataset: Dataset,
    config: TrainerConfig,
    test_dataset: Dataset | None = None,
) -> tuple[SplitPlan, dict[str, Sample]]:
    """Build the train/validation/test plan and the id -> sample index.

    Without a separate test file, the dataset is split by the task ratio;
    with one, the whole primary file is the train side. Validation is
    carved out of the train side once and frozen for the entire run.
    """
    pool = {s.id: s for s in dataset.samples}
    if test_dataset is None:
        plan = split_dataset(dataset, dataset.task.split_ratio, config.rng_seed + SPLIT_SEED_OFFSET)
    else:
        for s in test_dataset.samples:
            if s.id in pool:
                raise DataError(f"sample id {s.id!r} appears in both train and test files")
            pool[s.id] = s
        plan = SplitPlan(
            train_ids=tuple(s.id for s in dataset.samples),
            test_ids=tuple(s.id for s in test_dataset.samples),
            seed=config.rng_seed,
        )
    validation_size = config.batch_size * config.validation_multiplier
    plan = sample_validation(plan, validation_size, config.rng_seed + VALIDATION_SEED_OFFSET)
    return plan, pool


def _truncate_jsonl(path: Path, max_step: int) -> None:
    # Drop records from batches past the checkpoint; they will be replayed.
    if not path.exists():
        return
    kept = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if json.loads(line).get("step", 0) <= max_step:
            kept.append(line)
    path.write_text("\n".join(kept) + ("\n" if kept else ""), encoding="utf-8")


def train(
    task: Task,
    dataset: Dataset,
    config: TrainerConfig,
    backend: ChatBackend,
    run_dir: str | Path,
    test_dataset: Dataset | None = None,
    resume: bool = False,
    bundle: PromptBundle = PromptBundle(),
) -> TrainState:
    """Run the full loop until the stop criterion fires.

    The program starts empty and recorded performances are seeded with its
    validation accuracy, so the acceptance gate is defined from the first
    batch. Backend failures checkpoint and raise :class:`TrainAbort`;
    rerunning with ``resume=True`` continues from the recorded step.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    plan, pool = prepare_splits(dataset, config, test_dataset)
    validation_set = [pool[i] for i in plan.validation_ids]
    events = EventLog(run_dir)
    rng = random.Random(config.rng_seed + REVISION_SEED_OFFSET)

    if resume:
        state = load_checkpoint(run_dir)
        if state.stopped:
            log.info("run already stopped (%s); nothing to resume", state.stop_reason)
            return state
        rng.setstate(rng_state_from_json(state.rng_state))
        _truncate_jsonl(run_dir / HISTORY_FILE, state.step)
        _truncate_jsonl(run_dir / EVENTS_FILE, state.step)
        log.info("resuming run at step %d (epoch %d)", state.step, state.epoch)
    else:
        state = TrainState(
            program=Program(origin_model=backend.model),
            rng_state=rng_state_to_json(rng.getstate()),
        )
        try:
            baseline_rows = guided_predictions(
                validation_set,
                state.program,
                task,
                backend,
                max_concurrency=config.max_concurrency,
                temperature=config.gen_temperature,
                bundle=bundle,
            )
        except BackendError as exc:
            raise TrainAbort(run_dir, exc) from exc
        baseline = accuracy([g for _, _, g in baseline_rows])
        state = replace(state, recorded_perfs=(baseline,))
        save_checkpoint(state, run_dir)
        append_history(run_dir, {"kind": "baseline", "step": 0, "val_accuracy": baseline})
        events.emit(step=0, phase="baseline", val_accuracy=baseline)
        log.info("baseline validation accuracy: %.1f", baseline)

    while not state.stopped:
        stop, reason = should_stop(state, config)
        if stop:
            state = replace(state, stopped=True, stop_reason=reason)
            break

        batches = make_batches(
            plan.train_ids, config.batch_size, state.epoch, config.rng_seed + BATCH_SEED_OFFSET
        )
        start_index = state.step - state.epoch * len(batches)
        interrupted = False

        for batch_ids in batches[start_index:]:
            step = state.step + 1
            batch = [pool[i] for i in batch_ids]
            try:
                state = _run_batch(
                    state, step, batch, task, config, backend, validation_set, run_dir, events, rng, bundle
                )
            except BackendError as exc:
                save_checkpoint(state, run_dir)
                log.error("backend failure at step %d: %s", step, exc)
                raise TrainAbort(run_dir, exc) from exc

            stop, reason = should_stop(state, config)
            if stop:
                state = replace(state, stopped=True, stop_reason=reason)
                interrupted = True
                break

        if not interrupted:
            state = replace(state, epoch=state.epoch + 1)
            save_checkpoint(state, run_dir)

    save_checkpoint(state, run_dir)
    events.emit(step=state.step, phase="stop", reason=state.stop_reason.value)
    log.info("training stopped at step %d: %s", state.step, state.stop_reason.value)
    return state


def _run_batch(
    state: TrainState,
    step: int,
    batch: list[Sample],
    task: Task,
    config: TrainerConfig,
    backend: ChatBackend,
    validation_set: list[Sample],
    run_dir: Path,
    events: EventLog,
    rng: random.Random,
    bundle: PromptBundle,
) -> TrainState:
    outcome = predict_batch(batch, state.program, task, backend, config, step, bundle)
    events.emit(
        step=step,
        phase="predict",
        batch_accuracy=outcome.batch_accuracy,
        batch_size=len(batch),
        wrong=len(outcome.wrong),
    )

    accepted: RevisionCandidate | None = None
    candidate_accs: list[float | None] = []
    wrong = collect_wrong_examples(outcome)
    if wrong:
        verified: list[RevisionCandidate] = []
        for _ in range(config.candidate_count):
            candidate = generate_candidate(wrong, state.program, task, config, backend, rng, bundle)
            if candidate is None:
                continue
            checked = verify_candidate(
                candidate, state.program, validation_set, task, backend, config, bundle
            )
            if checked is not None:
                verified.append(checked)
                candidate_accs.append(checked.val_accuracy)
        accepted = select_revision(verified, state.recorded_perfs, config)

    # Commit the batch: the step counter and the rng position advance together.
    state = replace(state, step=step, rng_state=rng_state_to_json(rng.getstate()))
    if accepted is not None:
        state = update_program(state, accepted, run_dir)
        log.info(
            "step %d: accepted revision #%d at validation accuracy %.1f",
            step,
            state.program.history_len,
            accepted.val_accuracy,
        )
        events.emit(
            step=step,
            phase="revise",
            candidates=candidate_accs,
            decision="accepted",
            val_accuracy=accepted.val_accuracy,
        )
    else:
        state = replace(state, stagnant_batches=state.stagnant_batches + 1)
        if wrong:
            events.emit(step=step, phase="revise", candidates=candidate_accs, decision="rejected")

    if state.updates_since_compression >= config.compression_every_updates:
        state = compress_program(
            state, task, backend, validation_set, config, run_dir, events, bundle
        )
    return state
