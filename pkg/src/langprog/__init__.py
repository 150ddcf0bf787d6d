"""Learn a natural-language program for a task and use it to guide inference.

The package trains against any OpenAI-compatible chat backend (or a
deterministic scripted mock), evaluates baseline / self-program / learned /
transfer modes, and persists resumable run directories.
"""

from .backend import (
    CachingBackend,
    ChatBackend,
    CompletionRequest,
    CompletionResponse,
    DiskCache,
    HttpBackend,
    MockBackend,
    MockScript,
    cache_key,
)
from .data import Dataset, SplitPlan, load_dataset, make_batches, sample_validation, split_dataset
from .evaluation import evaluate, run_self_program, run_transfer
from .grading import GradeResult, accuracy, extract_final_answer, grade, normalize_answer
from .model import (
    AnswerKind,
    EvalReport,
    Program,
    PromptMode,
    RevisionCandidate,
    Sample,
    Task,
    TrainerConfig,
    TrainState,
    append_revision,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import train

__version__ = "0.1.0"

__all__ = [
    "AnswerKind",
    "CachingBackend",
    "ChatBackend",
    "CompletionRequest",
    "CompletionResponse",
    "Dataset",
    "DiskCache",
    "EvalReport",
    "GradeResult",
    "HttpBackend",
    "MockBackend",
    "MockScript",
    "Program",
    "PromptMode",
    "RevisionCandidate",
    "Sample",
    "SplitPlan",
    "Task",
    "TrainState",
    "TrainerConfig",
    "accuracy",
    "append_revision",
    "cache_key",
    "evaluate",
    "extract_final_answer",
    "grade",
    "load_checkpoint",
    "load_dataset",
    "make_batches",
    "normalize_answer",
    "run_self_program",
    "run_transfer",
    "sample_validation",
    "save_checkpoint",
    "split_dataset",
    "train",
]
