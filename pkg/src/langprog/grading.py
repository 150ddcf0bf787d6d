"""Answer extraction and grading of free-form model output.

Extraction walks a fixed priority order: the last "answer is ..." clause,
then the last ``$...$`` math span, then a per-kind fallback (last option
letter, last number, last fraction-like token, and so on). Normalization
maps both the extracted text and the label onto one canonical form per
answer kind so that grading is a plain string comparison, with a small
absolute tolerance for the numeric kind only.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, localcontext
from enum import Enum
from fractions import Fraction
from typing import Iterable

from .model import AnswerKind

NUMERIC_TOLERANCE = 1e-6


class GradeReason(str, Enum):
    MATCH = "match"
    MISMATCH = "mismatch"
    EXTRACTION_FAILED = "extraction_failed"


@dataclass(frozen=True)
class GradeResult:
    extracted: str
    normalized: str
    correct: bool
    reason: GradeReason


_ANSWER_IS_RE = re.compile(
    r"answer\s+is\s*:?\s*(?P<body>.+?)(?=\.\s|\.$|\n|$)",
    re.IGNORECASE,
)
_MATH_SPAN_RE = re.compile(r"\$([^$]+)\$")
_BOXED_RE = re.compile(r"\\boxed\s*\{([^{}]*)\}")
_OPTION_LETTER_RE = re.compile(r"\(([A-Ea-e])\)|\b([A-E])\b")
_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")
_INT_RE = re.compile(r"-?\d+")
_QUOTED_RE = re.compile(r"[\"'\u201c\u2018]([A-Za-z]+)[\"'\u201d\u2019]")
_LETTER_RUN_RE = re.compile(r"[A-Za-z]+")

# Rational token forms, most specific first: mixed numbers (plain and LaTeX),
# \frac-style fractions, plain a/b, then bare decimals/integers.
_RATIONAL_RE = re.compile(
    r"""
    (?P<mixed_latex>(?P<mlw>-?\d+)\s*\\[dt]?frac\s*\{(?P<mln>\d+)\}\s*\{(?P<mld>\d+)\})
    | (?P<mixed>(?P<mw>-?\d+)[ \t]+(?P<mn>\d+)\s*/\s*(?P<md>\d+))
    | (?P<latex>(?P<lsign>-?)\\[dt]?frac\s*\{(?P<ln>-?\d+)\}\s*\{(?P<ld>-?\d+)\})
    | (?P<plain>(?P<pn>-?\d+)\s*/\s*(?P<pd>-?\d+))
    | (?P<number>-?\d+(?:\.\d+)?)
    """,
    re.VERBOSE,
)


def _cleanup(text: str) -> str:
    """Strip math wrappers and rewrite LaTeX degree marks as a degree sign."""
    t = text.strip()
    t = _BOXED_RE.sub(r"\1", t)
    t = t.replace("^{\\circ}", "\u00b0").replace("^\\circ", "\u00b0")
    t = t.strip()
    if t.startswith("$") and t.endswith("$") and len(t) >= 2:
        t = t[1:-1].strip()
    t = t.rstrip(".,;:!? ").strip()
    return t


def _last_match(pattern: re.Pattern[str], text: str) -> re.Match[str] | None:
    last = None
    for m in pattern.finditer(text):
        last = m
    return last


def _kind_fallback(output: str, kind: AnswerKind) -> str | None:
    if kind is AnswerKind.MULTIPLE_CHOICE:
        m = _last_match(_OPTION_LETTER_RE, output)
        if m:
            return (m.group(1) or m.group(2)).upper()
        return None
    if kind in (AnswerKind.NUMERIC, AnswerKind.SIG_FIGS_COUNT):
        m = _last_match(_NUMBER_RE, _strip_digit_commas(output))
        return m.group(0) if m else None
    if kind in (AnswerKind.FRACTION, AnswerKind.MIXED_NUMBER):
        m = _last_match(_RATIONAL_RE, output)
        return m.group(0) if m else None
    if kind is AnswerKind.LETTER_CONCAT:
        m = _last_match(_QUOTED_RE, output)
        if m:
            return m.group(1)
        m = _last_match(_LETTER_RUN_RE, output)
        return m.group(0) if m else None
    # Action sequences and free text: the remaining output is the answer.
    stripped = output.strip()
    return stripped or None


def extract_final_answer(output: str, kind: AnswerKind) -> str | None:
    """Pull the answer substring out of a model's full output.

    Returns None when nothing extractable is found; callers grade that as
    an ordinary wrong prediction.
    """
    m = _last_match(_ANSWER_IS_RE, output)
    if m:
        body = _cleanup(m.group("body"))
        if body:
            return _tidy_for_kind(body, kind)
    m = _last_match(_MATH_SPAN_RE, output)
    if m:
        body = _cleanup(m.group(1))
        if body:
            return _tidy_for_kind(body, kind)
    fallback = _kind_fallback(output, kind)
    if fallback is None:
        return None
    return _cleanup(fallback) or None


def _tidy_for_kind(body: str, kind: AnswerKind) -> str:
    # "(B)" and friends reduce to the bare option letter.
    if kind is AnswerKind.MULTIPLE_CHOICE:
        m = _last_match(_OPTION_LETTER_RE, body)
        if m:
            return (m.group(1) or m.group(2)).upper()
    return body


def _strip_digit_commas(text: str) -> str:
    return re.sub(r"(?<=\d),(?=\d)", "", text)


def _parse_rational(text: str) -> Fraction | None:
    """Parse the last rational-looking token in ``text`` into a Fraction."""
    m = _last_match(_RATIONAL_RE, _strip_digit_commas(text))
    if m is None:
        return None
    try:
        if m.group("mixed_latex"):
            whole = int(m.group("mlw"))
            frac = Fraction(int(m.group("mln")), int(m.group("mld")))
        elif m.group("mixed"):
            whole = int(m.group("mw"))
            frac = Fraction(int(m.group("mn")), int(m.group("md")))
        elif m.group("latex"):
            value = Fraction(int(m.group("ln")), int(m.group("ld")))
            return -value if m.group("lsign") == "-" else value
        elif m.group("plain"):
            return Fraction(int(m.group("pn")), int(m.group("pd")))
        else:
            return Fraction(m.group("number"))
    except (ValueError, ZeroDivisionError):
        return None
    # Mixed numbers: the sign of the whole part applies to the fraction too.
    sign = -1 if m.group(0).lstrip().startswith("-") else 1
    return sign * (abs(Fraction(whole)) + frac)


def _render_fraction(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


def _render_mixed(value: Fraction) -> str:
    sign = "-" if value < 0 else ""
    mag = abs(value)
    whole, rest = divmod(mag.numerator, mag.denominator)
    if rest == 0:
        return f"{sign}{whole}"
    frac = Fraction(rest, mag.denominator)
    if whole == 0:
        return f"{sign}{frac.numerator}/{frac.denominator}"
    return f"{sign}{whole} {frac.numerator}/{frac.denominator}"


def _render_decimal(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    den = value.denominator
    while den % 2 == 0:
        den //= 2
    while den % 5 == 0:
        den //= 5
    with localcontext() as ctx:
        # Terminating decimals render exactly; repeating ones pin to 12
        # significant digits, which re-parse to a terminating fraction and
        # keep normalization idempotent.
        ctx.prec = 60 if den == 1 else 12
        dec = Decimal(value.numerator) / Decimal(value.denominator)
        text = format(dec.normalize(), "f")
    return "0" if text in ("-0", "") else text


_DEGREE_WORDS_RE = re.compile(r"\u00b0|\\circ|\bdegrees?\b|\bunits?\b", re.IGNORECASE)


def normalize_answer(text: str, kind: AnswerKind) -> str | None:
    """Map an answer onto its canonical text form; None when unparseable."""
    t = _cleanup(text)
    if not t:
        return None
    if kind is AnswerKind.FRACTION:
        value = _parse_rational(t)
        return None if value is None else _render_fraction(value)
    if kind is AnswerKind.MIXED_NUMBER:
        value = _parse_rational(t)
        return None if value is None else _render_mixed(value)
    if kind is AnswerKind.NUMERIC:
        value = _parse_rational(_DEGREE_WORDS_RE.sub("", t))
        return None if value is None else _render_decimal(value)
    if kind is AnswerKind.SIG_FIGS_COUNT:
        m = _last_match(_INT_RE, t)
        return None if m is None else str(int(m.group(0)))
    if kind is AnswerKind.MULTIPLE_CHOICE:
        letters = [c for c in t if c.isalpha()]
        if len(letters) == 1:
            return letters[0].upper()
        m = _last_match(_OPTION_LETTER_RE, t)
        if m:
            return (m.group(1) or m.group(2)).upper()
        return None
    if kind is AnswerKind.LETTER_CONCAT:
        letters = re.sub(r"[^a-z]", "", t.lower())
        return letters or None
    if kind is AnswerKind.ACTION_SEQUENCE:
        steps = re.split(r"\d+\s*[.)]\s*|\n+|;|,", t.lower())
        steps = [re.sub(r"\s+", " ", s).strip() for s in steps]
        steps = [s for s in steps if s]
        return "; ".join(steps) or None
    return re.sub(r"\s+", " ", t.casefold()).strip() or None


def grade(output: str, label: str, kind: AnswerKind) -> GradeResult:
    """Grade a model output against the canonical label for this kind."""
    label_norm = normalize_answer(label, kind)
    if label_norm is None:
        raise ValueError(f"label {label!r} does not parse under kind {kind.value}")

    extracted = extract_final_answer(output, kind)
    if extracted is None:
        return GradeResult("", "", False, GradeReason.EXTRACTION_FAILED)

    normalized = normalize_answer(extracted, kind)
    if normalized is None:
        return GradeResult(extracted, "", False, GradeReason.MISMATCH)

    correct = normalized == label_norm
    if not correct and kind is AnswerKind.NUMERIC:
        try:
            correct = abs(float(normalized) - float(label_norm)) <= NUMERIC_TOLERANCE
        except ValueError:
            correct = False
    reason = GradeReason.MATCH if correct else GradeReason.MISMATCH
    return GradeResult(extracted, normalized, correct, reason)


def accuracy(results: Iterable[GradeResult]) -> float:
    """Percentage of correct results; full precision, rejects empty input."""
    items = list(results)
    if not items:
        raise ValueError("accuracy over an empty result list is undefined")
    return 100.0 * sum(1 for r in items if r.correct) / len(items)


def format_accuracy(value: float) -> str:
    """One-decimal display form used in report tables."""
    return f"{value:.1f}"
