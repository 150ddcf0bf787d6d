"""Domain value types and on-disk checkpointing of training runs.

All types here are immutable; trainer code advances state with
``dataclasses.replace`` and persists snapshots through ``save_checkpoint``.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

PROGRAM_FILE = "program.txt"
STATE_FILE = "state.json"
HISTORY_FILE = "history.jsonl"
REPORTS_DIR = "reports"

BLOCK_SEPARATOR = "\n\n"


class AnswerKind(str, Enum):
    FRACTION = "fraction"
    MIXED_NUMBER = "mixed_number"
    NUMERIC = "numeric"
    SIG_FIGS_COUNT = "sig_figs_count"
    MULTIPLE_CHOICE = "multiple_choice"
    LETTER_CONCAT = "letter_concat"
    ACTION_SEQUENCE = "action_sequence"
    FREE_TEXT = "free_text"


class PromptMode(str, Enum):
    ZERO_SHOT_COT = "zero_shot_cot"
    FEW_SHOT_COT = "few_shot_cot"


class StopReason(str, Enum):
    STAGNATION = "stagnation"
    EPOCHS_EXHAUSTED = "epochs_exhausted"
    MANUAL = "manual"


class EvalMode(str, Enum):
    BASELINE = "baseline"
    SELF_PROGRAM = "self_program"
    LP = "lp"
    TRANSFER = "transfer"


class SplitName(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class CheckpointError(Exception):
    """Raised when a run directory cannot be written or read back."""


@dataclass(frozen=True)
class Sample:
    """One labeled question."""

    id: str
    question: str
    answer: str
    choices: tuple[str, ...] | None = None
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("sample id must be nonempty")
        if not self.answer:
            raise ValueError(f"sample {self.id!r}: answer must be nonempty")
        if self.choices is not None and len(self.choices) < 2:
            raise ValueError(f"sample {self.id!r}: choices needs at least 2 entries")


@dataclass(frozen=True)
class Demo:
    """One worked example shown before the test question in few-shot mode."""

    question: str
    solution: str
    answer: str


# Demo counts used by the few-shot presets; other counts are rejected.
FEW_SHOT_DEMO_COUNTS = (4, 6)
MAX_SOLUTIONS_CHOICES = (5, 10)


@dataclass(frozen=True)
class Task:
    """Task-level prompting and grading configuration."""

    name: str
    answer_kind: AnswerKind
    prompt_mode: PromptMode = PromptMode.ZERO_SHOT_COT
    demos: tuple[Demo, ...] = ()
    max_solutions: int = 5
    split_ratio: tuple[int, int] = (3, 1)

    def __post_init__(self) -> None:
        if self.max_solutions not in MAX_SOLUTIONS_CHOICES:
            raise ValueError(f"max_solutions must be one of {MAX_SOLUTIONS_CHOICES}")
        if self.prompt_mode is PromptMode.FEW_SHOT_COT:
            if len(self.demos) not in FEW_SHOT_DEMO_COUNTS:
                raise ValueError(
                    f"few-shot mode expects {FEW_SHOT_DEMO_COUNTS} demos, got {len(self.demos)}"
                )
        if self.split_ratio[0] < 1 or self.split_ratio[1] < 1:
            raise ValueError("split_ratio parts must be positive")


@dataclass(frozen=True)
class Program:
    """The learned natural-language program: an ordered list of text blocks.

    Each block is one accepted revision or the output of one accepted
    compression pass. ``rendered`` joins blocks with a blank line, and an
    empty block list renders as the empty string.
    """

    blocks: tuple[str, ...] = ()
    origin_model: str = ""
    history_len: int = 0

    @property
    def rendered(self) -> str:
        return BLOCK_SEPARATOR.join(self.blocks)

    @property
    def is_empty(self) -> bool:
        return not self.blocks


def append_revision(program: Program, revision_text: str) -> Program:
    """Return a new program with ``revision_text`` appended as the last block."""
    if not revision_text:
        raise ValueError("revision text must be nonempty")
    return replace(
        program,
        blocks=program.blocks + (revision_text,),
        history_len=program.history_len + 1,
    )


@dataclass(frozen=True)
class WrongExample:
    """A sample together with the incorrect output produced for it."""

    sample: Sample
    prediction: str
    extracted: str


@dataclass(frozen=True)
class RevisionCandidate:
    """A generated program revision, before or after validation scoring."""

    raw: str
    compressed: str
    val_accuracy: float | None = None
    seed_errors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.raw and not self.compressed:
            raise ValueError("compressed text must be nonempty when raw is nonempty")
        if self.val_accuracy is not None and not 0.0 <= self.val_accuracy <= 100.0:
            raise ValueError("val_accuracy must be in [0, 100]")


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 10
    batch_size: int = 32
    validation_multiplier: int = 5
    wrong_sample_count: int = 3
    candidate_count: int = 5
    improvement_threshold: float = 1.0
    recent_window: int = 3
    stagnation_limit: int = 10
    compression_every_updates: int = 3
    compression_tolerance: float = 1.0
    compression_max_attempts: int = 3
    gen_temperature: float = 0.0
    compress_temperature: float = 0.6
    max_concurrency: int = 8
    rng_seed: int = 0

    def __post_init__(self) -> None:
        counts = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "validation_multiplier": self.validation_multiplier,
            "wrong_sample_count": self.wrong_sample_count,
            "candidate_count": self.candidate_count,
            "recent_window": self.recent_window,
            "stagnation_limit": self.stagnation_limit,
            "compression_every_updates": self.compression_every_updates,
            "compression_max_attempts": self.compression_max_attempts,
            "max_concurrency": self.max_concurrency,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        for name, value in (
            ("gen_temperature", self.gen_temperature),
            ("compress_temperature", self.compress_temperature),
        ):
            if not 0.0 <= value <= 2.0:
                raise ValueError(f"{name} must be in [0, 2], got {value}")
        if self.improvement_threshold < 0:
            raise ValueError("improvement_threshold must be >= 0")
        if self.compression_tolerance < 0:
            raise ValueError("compression_tolerance must be >= 0")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be a nonnegative integer")


@dataclass(frozen=True)
class TrainState:
    """Full loop state; a checkpoint of this value resumes the run exactly."""

    step: int = 0
    epoch: int = 0
    program: Program = Program()
    recorded_perfs: tuple[float, ...] = ()
    stagnant_batches: int = 0
    updates_since_compression: int = 0
    rng_state: Any = None
    stopped: bool = False
    stop_reason: StopReason | None = None

    def __post_init__(self) -> None:
        if self.stopped and self.stop_reason is None:
            raise ValueError("stopped state requires a stop_reason")


@dataclass(frozen=True)
class SampleResult:
    """Per-sample evaluation record; full output kept so runs can be re-graded.

    ``program`` holds the per-sample generated program in zero-shot
    self-program mode, where no single shared program exists.
    """

    id: str
    extracted: str
    correct: bool
    output: str = ""
    program: str = ""


@dataclass(frozen=True)
class EvalReport:
    task: str
    mode: EvalMode
    backend_model: str
    split: SplitName
    accuracy: float
    n: int
    per_sample: tuple[SampleResult, ...]
    program_source_model: str | None = None
    program_text: str | None = None

    def __post_init__(self) -> None:
        correct = sum(1 for r in self.per_sample if r.correct)
        expected = 100.0 * correct / self.n if self.n else 0.0
        if self.n != len(self.per_sample) or self.accuracy != expected:
            raise ValueError("accuracy must equal 100 * correct / n over per_sample")


def rng_state_to_json(state: Any) -> Any:
    """Make ``random.Random().getstate()`` JSON-serializable."""
    version, internal, gauss_next = state
    return [version, list(internal), gauss_next]


def rng_state_from_json(data: Any) -> Any:
    version, internal, gauss_next = data
    return (version, tuple(internal), gauss_next)


def seeded_rng(seed: int) -> random.Random:
    return random.Random(seed)


def _atomic_write_text(path: Path, text: str) -> None:
    # Temp-then-rename so readers never observe a partially written file.
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc


def save_checkpoint(state: TrainState, run_dir: str | os.PathLike[str]) -> None:
    """Persist ``state`` into ``run_dir`` (program.txt + state.json)."""
    base = Path(run_dir)
    try:
        base.mkdir(parents=True, exist_ok=True)
        (base / REPORTS_DIR).mkdir(exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"cannot create run directory {base}: {exc}") from exc

    record = {
        "step": state.step,
        "epoch": state.epoch,
        "program": {
            "blocks": list(state.program.blocks),
            "origin_model": state.program.origin_model,
            "history_len": state.program.history_len,
        },
        "recorded_perfs": list(state.recorded_perfs),
        "stagnant_batches": state.stagnant_batches,
        "updates_since_compression": state.updates_since_compression,
        "rng_state": state.rng_state,
        "stopped": state.stopped,
        "stop_reason": state.stop_reason.value if state.stop_reason else None,
    }
    _atomic_write_text(base / STATE_FILE, json.dumps(record, indent=2) + "\n")
    _atomic_write_text(base / PROGRAM_FILE, state.program.rendered)


def load_checkpoint(run_dir: str | os.PathLike[str]) -> TrainState:
    """Reload a state saved by :func:`save_checkpoint`."""
    base = Path(run_dir)
    state_path = base / STATE_FILE
    if not state_path.exists():
        raise CheckpointError(f"missing state record: {state_path}")
    if not (base / PROGRAM_FILE).exists():
        raise CheckpointError(f"missing program file: {base / PROGRAM_FILE}")
    try:
        record = json.loads(state_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt state record {state_path}: {exc}") from exc

    try:
        program = Program(
            blocks=tuple(record["program"]["blocks"]),
            origin_model=record["program"]["origin_model"],
            history_len=record["program"]["history_len"],
        )
        state = TrainState(
            step=record["step"],
            epoch=record["epoch"],
            program=program,
            recorded_perfs=tuple(record["recorded_perfs"]),
            stagnant_batches=record["stagnant_batches"],
            updates_since_compression=record["updates_since_compression"],
            rng_state=record["rng_state"],
            stopped=record["stopped"],
            stop_reason=StopReason(record["stop_reason"]) if record["stop_reason"] else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt state record {state_path}: {exc}") from exc

    stored = (base / PROGRAM_FILE).read_text(encoding="utf-8")
    if stored != program.rendered:
        raise CheckpointError(f"program file {base / PROGRAM_FILE} disagrees with state record")
    return state


def append_history(run_dir: str | os.PathLike[str], record: Mapping[str, Any]) -> None:
    """Append one record to the run's append-only history log."""
    path = Path(run_dir) / HISTORY_FILE
    try:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(dict(record)) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
    except OSError as exc:
        raise CheckpointError(f"cannot append to {path}: {exc}") from exc


def read_history(run_dir: str | os.PathLike[str]) -> list[dict[str, Any]]:
    path = Path(run_dir) / HISTORY_FILE
    if not path.exists():
        return []
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(json.loads(line))
    return records
