"""Pure rendering of the five prompt families used across the pipeline.

Every renderer is a deterministic function of its inputs. Templates use
``str.format`` named slots and can be overridden from plain-text files;
the defaults are embedded here.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .model import Program, PromptMode, Sample, Task, WrongExample

COT_TRIGGER = "Let's think step by step"
PROGRAM_HEADER = "Natural language program:"
EMPTY_PROGRAM_MARKER = "(empty)"

DEFAULT_GUIDED_INFERENCE_TPL = "{demos}{program}{question}\n{cot_trigger}"

DEFAULT_SELF_PROGRAM_TPL = (
    "{question}\n"
    "You can generate general solutions to solve all questions similar to the above question.\n"
    "You can consider equations and algorithms.\n"
    "When generating one solution, you should write no more than two sentences for one solution.\n"
    "Solutions:"
)

DEFAULT_REVISION_TPL = (
    "{wrong_cases}\n"
    "You can generate two or three new correct solutions to avoid the above wrong outputs "
    "and to solve all questions refer to the above questions.\n"
    "You must generate solutions different from those previous solutions in the previous "
    "natural language program: {prev_program}.\n"
    "You can generate equations and Python algorithms.\n"
    "When generating one solution, you should write no more than two sentences for one solution.\n"
    "You must not generate detailed examples as we need general solutions"
)

DEFAULT_REVISION_COMPRESS_TPL = (
    "You should summarize the similar solutions in [{revision}] into one solution.\n"
    "You should maintain solutions for solving different situations.\n"
    "You must only output no more than {max_solutions} main solutions.\n"
    "When generating one solution, you should write no more than two sentences for one solution."
)

DEFAULT_PROGRAM_COMPRESS_TPL = (
    "You should summarize the similar solutions in [{program}] into one solution.\n"
    "You should maintain solutions for solving different situations.\n"
    "You must only output no more than {max_solutions} main solutions.\n"
    "When generating one solution, you should write no more than two sentences for one solution.\n"
    "The summarized natural language program should be shorter and more general."
)

_COUNT_WORDS = {5: "five", 10: "ten"}


def _count_word(n: int) -> str:
    return _COUNT_WORDS.get(n, str(n))


@dataclass(frozen=True)
class PromptBundle:
    guided_inference_tpl: str = DEFAULT_GUIDED_INFERENCE_TPL
    self_program_tpl: str = DEFAULT_SELF_PROGRAM_TPL
    revision_tpl: str = DEFAULT_REVISION_TPL
    revision_compress_tpl: str = DEFAULT_REVISION_COMPRESS_TPL
    program_compress_tpl: str = DEFAULT_PROGRAM_COMPRESS_TPL
    cot_trigger: str = COT_TRIGGER

    @classmethod
    def from_dir(cls, template_dir: str | Path) -> "PromptBundle":
        """Load ``<slot>.txt`` overrides from a directory; missing files keep defaults."""
        base = Path(template_dir)
        overrides = {}
        for f in fields(cls):
            if not f.name.endswith("_tpl"):
                continue
            path = base / (f.name.removesuffix("_tpl") + ".txt")
            if path.exists():
                overrides[f.name] = path.read_text(encoding="utf-8")
        return cls(**overrides)


def _fill(template: str, **slots: str) -> str:
    try:
        return template.format(**slots)
    except (KeyError, IndexError) as exc:
        raise ValueError(f"template references unknown slot: {exc}") from exc


def _render_demos(task: Task) -> str:
    parts = []
    for demo in task.demos:
        parts.append(f"Question: {demo.question}\nAnswer: {demo.solution} The answer is {demo.answer}.")
    return "\n\n".join(parts) + "\n\n" if parts else ""


def render_guided_inference(
    task: Task, program: Program, sample: Sample, bundle: PromptBundle = PromptBundle()
) -> str:
    """Build the generation prompt: demos, program, question, CoT trigger, in that order.

    The program header is omitted entirely while the program is empty, so
    the plain chain-of-thought baseline is exactly this renderer with an
    empty program.
    """
    demos = _render_demos(task) if task.prompt_mode is PromptMode.FEW_SHOT_COT else ""
    program_block = f"{PROGRAM_HEADER}\n{program.rendered}\n\n" if not program.is_empty else ""
    question = (
        f"Question: {sample.question}"
        if task.prompt_mode is PromptMode.FEW_SHOT_COT
        else sample.question
    )
    return _fill(
        bundle.guided_inference_tpl,
        demos=demos,
        program=program_block,
        question=question,
        cot_trigger=bundle.cot_trigger,
    )


def render_self_program(sample: Sample, bundle: PromptBundle = PromptBundle()) -> str:
    """Ask the model for general solutions covering questions like this sample."""
    return _fill(bundle.self_program_tpl, question=sample.question)


def _render_wrong_cases(wrong: list[WrongExample]) -> str:
    parts = []
    for case in wrong:
        parts.append(
            f"Question: {case.sample.question}\n"
            f"Wrong output: {case.prediction}\n"
            f"Correct answer: {case.sample.answer}"
        )
    return "\n\n".join(parts)


def render_revision(
    wrong: list[WrongExample], prev_program: Program, bundle: PromptBundle = PromptBundle()
) -> str:
    """Ask for new general solutions that fix the given wrong cases."""
    if not wrong:
        raise ValueError("revision prompt needs at least one wrong example")
    prev = prev_program.rendered if not prev_program.is_empty else EMPTY_PROGRAM_MARKER
    return _fill(
        bundle.revision_tpl,
        wrong_cases=_render_wrong_cases(wrong),
        prev_program=prev,
    )


def render_revision_compression(
    revision: str, max_solutions: int, bundle: PromptBundle = PromptBundle()
) -> str:
    """Ask for a deduplicated summary of one revision candidate."""
    if not revision:
        raise ValueError("cannot compress an empty revision")
    return _fill(
        bundle.revision_compress_tpl,
        revision=revision,
        max_solutions=_count_word(max_solutions),
    )


def render_program_compression(
    program: Program, max_solutions: int, bundle: PromptBundle = PromptBundle()
) -> str:
    """Ask for a shorter, more general form of the whole program."""
    if program.is_empty:
        raise ValueError("cannot compress an empty program")
    return _fill(
        bundle.program_compress_tpl,
        program=program.rendered,
        max_solutions=_count_word(max_solutions),
    )
