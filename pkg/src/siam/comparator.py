"""Heuristic exact-match equivalence between reference answers and execution results.

Reference answers scraped from the web mix final answers with explanations,
tags, and URLs, and live in natural-language or LaTeX-ish syntax, while code
execution results come back in programming-language syntax. This module
bridges the two: it strips noise, classifies each side into a small canonical
shape (number, pair, tuple, choice label, expression, plain text), and
compares shapes with numeric tolerance and light syntax conversion (implicit
multiplication, caret-to-power, fraction forms).

Everything here is pure and deterministic; the comparator never consults the
critic, which keeps it usable as the critic's independent oracle.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, replace
from itertools import permutations

import sympy
from sympy.parsing.sympy_parser import (
    implicit_multiplication_application,
    parse_expr,
    standard_transformations,
)

KIND_NUMBER = "number"
KIND_NUMBER_PAIR = "number_pair"
KIND_EXPRESSION = "expression"
KIND_TUPLE = "tuple"
KIND_CHOICE_LABEL = "choice_label"
KIND_TEXT = "text"

CHOICE_LABELS = "ABCDEFGH"

_PARSE_TRANSFORMATIONS = standard_transformations + (implicit_multiplication_application,)

# Seed for the sampled-evaluation equivalence check; fixed so comparisons are
# reproducible run to run.
_SAMPLE_SEED = 0x5EED
_SAMPLE_POINTS = 5
_MAX_SAMPLE_DRAWS = 40


@dataclass(frozen=True)
class MatchConfig:
    """Tolerances and normalization switches for answer comparison."""

    abs_tol: float = 1e-6
    rel_tol: float = 1e-6
    strip_cot: bool = True
    unit_suffix_numeric: bool = True

    def __post_init__(self) -> None:
        if self.abs_tol < 0 or self.rel_tol < 0:
            raise ValueError("tolerances must be non-negative")


@dataclass(frozen=True)
class CanonicalAnswer:
    """Normalized view of an answer.

    ``values`` holds canonical atom strings: a single numeric atom for
    ``number``, two for ``number_pair``, per-element strings for ``tuple``,
    the label letter for ``choice_label``, and the bridged source text for
    ``expression``. Disjunctive answers ("3 or 7") keep ``kind == "text"``
    with each branch normalized into ``alternatives``.
    """

    kind: str
    values: tuple[str, ...]
    raw: str
    set_like: bool = False
    alternatives: tuple["CanonicalAnswer", ...] = ()


_URL_RE = re.compile(r"(?:https?://|www\.)\S+", re.IGNORECASE)
_TAG_RE = re.compile(r"</?[A-Za-z][A-Za-z0-9]*(?:\s[^<>]*)?>")
_BOXED_RE = re.compile(r"\\boxed\s*", re.IGNORECASE)
_FRAC_RE = re.compile(r"\\[dt]?frac\s*(\{[^{}]*\}|\d)\s*(\{[^{}]*\}|\d)")
_SQRT_RE = re.compile(r"\\sqrt\s*(?:\{([^{}]*)\}|(\d))")
_TEXT_CMD_RE = re.compile(r"\\(?:text|mathrm|mathbf|operatorname)\s*\{([^{}]*)\}")
_LHS_RE = re.compile(r"^\s*[A-Za-z]\w?\s*$")

_FULLWIDTH_MAP = str.maketrans(
    {
        "（": "(",
        "）": ")",
        "，": ",",
        "：": ":",
        "；": ";",
        "．": ".",
        "＝": "=",
        "－": "-",
        "＋": "+",
        "×": "*",
        "÷": "/",
        "−": "-",
        "–": "-",
    }
)

# Single-letter tokens accepted as measurement units; longer alphabetic or
# CJK suffixes are always treated as units. A lone latin letter outside this
# set reads as a variable, not a unit.
_SINGLE_LETTER_UNITS = {"m", "s", "g", "L", "h", "t"}

_NUMBER_BODY = r"[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?:[eE][+-]?\d+)?|[+-]?\.\d+"
_NUMBER_RE = re.compile(rf"^(?:{_NUMBER_BODY})$")
_UNIT_SUFFIX_RE = re.compile(
    rf"^(?P<num>{_NUMBER_BODY})\s*(?P<unit>%|°[CF]?|℃|[A-Za-z]+(?:/[A-Za-z]+)?|[\u4e00-\u9fff]+)$"
)
_FRACTION_RE = re.compile(r"^\(?\s*([+-]?\d+(?:\.\d+)?)\s*\)?\s*/\s*\(?\s*([+-]?\d+(?:\.\d+)?)\s*\)?$")

_MATH_WORDS = {
    "sqrt", "sin", "cos", "tan", "cot", "sec", "csc", "log", "ln", "exp",
    "abs", "pi", "asin", "acos", "atan", "sinh", "cosh", "tanh", "oo",
}

# Letters-only guard before a label: "USA:" yields no A option, while the
# dense rendering "A: 3B: 2C: 1D: 0" (no space before B) still parses.
_OPTION_LABEL_RE = re.compile(r"(?<![A-Za-z])([A-H])\s*[.:：、]\s*")


def normalize_answer(text: str, config: MatchConfig | None = None) -> CanonicalAnswer:
    """Normalize an answer string into its canonical shape.

    Final-answer markers ("####", boxed) take precedence over the full text;
    URLs and markup are dropped; numerals are normalized across fraction,
    thousands-separator, and LaTeX-like spellings. Unclassifiable input comes
    back as ``kind="text"`` with the raw string preserved.
    """
    config = config or MatchConfig()
    raw = text if text is not None else ""
    try:
        cleaned = _clean(raw, config)
        return _classify(cleaned, raw, config, allow_disjunction=True)
    except (RecursionError, ValueError, OverflowError):
        # Total by contract: pathological input degrades to plain text.
        return CanonicalAnswer(KIND_TEXT, (), raw)


def em_compare(
    reference: str,
    candidate_value: str,
    question: str = "",
    config: MatchConfig | None = None,
) -> bool:
    """True when a code execution value matches the reference answer.

    Numbers compare within combined tolerance; tuples element-wise (set-like
    braces are order-insensitive); expressions after syntax bridging plus
    sampled numeric evaluation; bare-value candidates resolve against option
    contents when the reference is a choice label. Unbridgeable pairs are
    simply False, never errors.
    """
    config = config or MatchConfig()
    try:
        ref = normalize_answer(reference, config)
        cand = normalize_answer(candidate_value, config)
        return _match(ref, cand, question, config)
    except Exception:
        return False


def parse_options(question: str) -> dict[str, str]:
    """Extract multiple-choice options from question text.

    Recognizes a contiguous run of "A:", "A." style labels starting at A (at
    least two options). The content of each option runs until the next label
    or the end of the text. Returns an empty mapping when no such run exists.
    """
    if not question:
        return {}
    text = question.translate(_FULLWIDTH_MAP)
    matches = list(_OPTION_LABEL_RE.finditer(text))
    if not matches:
        return {}
    # Keep the last run of consecutive labels starting at A; answer options
    # normally trail the question stem.
    starts = [i for i, m in enumerate(matches) if m.group(1) == "A"]
    for start in reversed(starts):
        run = [matches[start]]
        for m in matches[start + 1 :]:
            expected = chr(ord(run[-1].group(1)) + 1)
            if m.group(1) == expected:
                run.append(m)
            elif m.group(1) <= run[-1].group(1):
                continue
            else:
                break
        if len(run) >= 2:
            options: dict[str, str] = {}
            for i, m in enumerate(run):
                end = run[i + 1].start() if i + 1 < len(run) else len(text)
                options[m.group(1)] = text[m.end() : end].strip()
            return options
    return {}


# ---------------------------------------------------------------------------
# Normalization internals


def _clean(text: str, config: MatchConfig) -> str:
    s = text.strip()
    if config.strip_cot:
        s = _strip_cot_tail(s)
    s = _URL_RE.sub(" ", s)
    s = _TAG_RE.sub("", s)
    s = s.translate(_FULLWIDTH_MAP)
    s = _strip_latex(s)
    s = s.strip()
    # Markdown bold wrapping the whole answer, e.g. "**72**".
    if s.startswith("**") and s.endswith("**") and len(s) > 4:
        s = s[2:-2].strip()
    s = s.strip()
    while s and s[-1] in ".。;；!？?":
        s = s[:-1].rstrip()
    # Short left-hand sides like "x = 5" carry no content of their own.
    if s.count("=") == 1:
        lhs, rhs = s.split("=")
        if _LHS_RE.match(lhs) and rhs.strip():
            s = rhs.strip()
    return s.strip()


def _strip_cot_tail(s: str) -> str:
    if "####" in s:
        s = s.rsplit("####", 1)[1].strip()
    boxed = _extract_last_boxed(s)
    if boxed is not None:
        s = boxed
    return s


def _extract_last_boxed(s: str) -> str | None:
    last = None
    for m in _BOXED_RE.finditer(s):
        i = m.end()
        if i >= len(s) or s[i] != "{":
            continue
        depth = 0
        for j in range(i, len(s)):
            if s[j] == "{":
                depth += 1
            elif s[j] == "}":
                depth -= 1
                if depth == 0:
                    last = s[i + 1 : j]
                    break
    return last


def _strip_latex(s: str) -> str:
    s = s.replace("\\left", "").replace("\\right", "")
    s = s.replace("\\!", "").replace("\\,", " ").replace("\\;", " ")
    s = s.replace("\\%", "%").replace("\\$", "$")
    s = _TEXT_CMD_RE.sub(r"\1", s)
    s = _FRAC_RE.sub(lambda m: f"({_unbrace(m.group(1))})/({_unbrace(m.group(2))})", s)
    s = _SQRT_RE.sub(lambda m: f"sqrt({m.group(1) or m.group(2)})", s)
    s = s.replace("\\cdot", "*").replace("\\times", "*").replace("\\div", "/")
    s = s.replace("\\pi", "pi")
    s = s.replace("$", "").replace("\\(", "").replace("\\)", "").replace("\\[", "").replace("\\]", "")
    return s


def _unbrace(part: str) -> str:
    return part[1:-1] if part.startswith("{") else part


def _classify(
    s: str, raw: str, config: MatchConfig, allow_disjunction: bool
) -> CanonicalAnswer:
    if not s:
        return CanonicalAnswer(KIND_TEXT, (), raw)

    if allow_disjunction:
        parts = _split_disjunction(s)
        if parts is not None:
            branches = tuple(
                _classify(_clean(p, config), p, config, allow_disjunction=False) for p in parts
            )
            if all(b.kind != KIND_TEXT for b in branches):
                return CanonicalAnswer(KIND_TEXT, (), raw, alternatives=branches)

    label = _parse_choice_label(s)
    if label is not None:
        return CanonicalAnswer(KIND_CHOICE_LABEL, (label,), raw)

    number = _parse_number(s, config)
    if number is not None:
        return CanonicalAnswer(KIND_NUMBER, (_format_number(number),), raw)

    structure = _parse_structure(s)
    if structure is not None:
        elements, set_like = structure
        if len(elements) == 1:
            inner = _classify(elements[0], raw, config, allow_disjunction=False)
            if inner.kind != KIND_TEXT:
                return replace(inner, raw=raw)
        return CanonicalAnswer(KIND_TUPLE, tuple(elements), raw, set_like=set_like)

    pair = _parse_bare_pair(s, config)
    if pair is not None:
        return CanonicalAnswer(KIND_NUMBER_PAIR, pair, raw)

    if _looks_like_expression(s):
        return CanonicalAnswer(KIND_EXPRESSION, (_bridge_syntax(s),), raw)

    return CanonicalAnswer(KIND_TEXT, (_collapse_ws(s),), raw)


def _split_disjunction(s: str) -> list[str] | None:
    parts: list[str] = []
    depth = 0
    token_start = 0
    i = 0
    lowered = s.lower()
    while i < len(s):
        ch = s[i]
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        elif depth == 0:
            if ch == "或":
                parts.append(s[token_start:i])
                token_start = i + 1
            elif lowered.startswith("or", i) and _is_word_boundary(s, i, i + 2):
                parts.append(s[token_start:i])
                token_start = i + 2
                i += 1
        i += 1
    if token_start == 0:
        return None
    parts.append(s[token_start:])
    parts = [p.strip() for p in parts]
    if len(parts) < 2 or len(parts) > 4 or any(not p for p in parts):
        return None
    return parts


def _is_word_boundary(s: str, start: int, end: int) -> bool:
    before_ok = start == 0 or not s[start - 1].isalnum()
    after_ok = end >= len(s) or not s[end].isalnum()
    return before_ok and after_ok


def _parse_choice_label(s: str) -> str | None:
    m = re.fullmatch(r"\(?\s*([A-H])\s*\)?[.)]?", s)
    if m:
        return m.group(1)
    return None


def _parse_number(s: str, config: MatchConfig) -> float | None:
    s = s.strip()
    while s and s[0] in "$¥€£￥":
        s = s[1:].lstrip()
    if not s:
        return None
    m = _FRACTION_RE.match(s)
    if m:
        denom = float(m.group(2))
        if denom == 0:
            return None
        return float(m.group(1)) / denom
    body = s
    if _NUMBER_RE.match(body):
        return float(body.replace(",", ""))
    if config.unit_suffix_numeric:
        m = _UNIT_SUFFIX_RE.match(s)
        if m:
            unit = m.group("unit")
            if len(unit) == 1 and unit.isascii() and unit.isalpha() and unit not in _SINGLE_LETTER_UNITS:
                return None
            if unit.lower() in _MATH_WORDS:
                return None
            return float(m.group("num").replace(",", ""))
    return None


def _format_number(x: float) -> str:
    if math.isfinite(x) and abs(x) < 1e15 and x == int(x):
        return str(int(x))
    return repr(x)


def _parse_structure(s: str) -> tuple[list[str], bool] | None:
    if len(s) < 2:
        return None
    pairs = {"(": ")", "[": "]", "{": "}"}
    opener = s[0]
    if opener not in pairs or s[-1] != pairs[opener]:
        return None
    inner = s[1:-1]
    if not _balanced(inner):
        return None
    chunks = _split_top_level(inner, ",;")
    if not chunks:
        return [], opener == "{"
    dict_like = opener == "{" and all(_top_level_colon(c) >= 0 for c in chunks)
    if dict_like:
        elements = [c[_top_level_colon(c) + 1 :].strip() for c in chunks]
        set_like = False
    else:
        elements = [c.strip() for c in chunks]
        set_like = opener == "{"
    elements = [_strip_quotes(e) for e in elements if e]
    if not elements:
        return None
    return elements, set_like


def _balanced(s: str) -> bool:
    depth = 0
    for ch in s:
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
            if depth < 0:
                return False
    return depth == 0


def _split_top_level(s: str, separators: str) -> list[str]:
    parts: list[str] = []
    depth = 0
    quote = ""
    start = 0
    for i, ch in enumerate(s):
        if quote:
            if ch == quote:
                quote = ""
            continue
        if ch in "'\"":
            quote = ch
        elif ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        elif depth == 0 and ch in separators:
            parts.append(s[start:i])
            start = i + 1
    parts.append(s[start:])
    return [p for p in (part.strip() for part in parts) if p]


def _top_level_colon(s: str) -> int:
    depth = 0
    quote = ""
    for i, ch in enumerate(s):
        if quote:
            if ch == quote:
                quote = ""
            continue
        if ch in "'\"":
            quote = ch
        elif ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        elif depth == 0 and ch == ":":
            return i
    return -1


def _strip_quotes(s: str) -> str:
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "'\"":
        return s[1:-1]
    return s


def _parse_bare_pair(s: str, config: MatchConfig) -> tuple[str, str] | None:
    normalized = re.sub(r"\b(?:and|与|和)\b", ",", s)
    tokens = _split_top_level(normalized, ",;")
    if len(tokens) != 2:
        tokens = s.split()
        if len(tokens) != 2:
            return None
    numbers = [_parse_number(t, config) for t in tokens]
    if any(n is None for n in numbers):
        return None
    return (_format_number(numbers[0]), _format_number(numbers[1]))


def _looks_like_expression(s: str) -> bool:
    if re.fullmatch(r"[A-Za-z]", s):
        return True
    if s.lower() in _MATH_WORDS:
        return True
    if not re.search(r"[0-9A-Za-z]", s):
        return False
    has_operator = bool(
        re.search(r"[+*/^=]|(?<=[0-9A-Za-z)])\s*-", s)
        or re.search(r"\d\s*[A-Za-z]|[A-Za-z]\s*\d\b|\)\s*\(", s)
        or re.search(r"[A-Za-z]\s*\(", s)
    )
    if not has_operator:
        return False
    prose = [w for w in re.findall(r"[A-Za-z]{3,}", s) if w.lower() not in _MATH_WORDS]
    return not prose


def _bridge_syntax(s: str) -> str:
    s = s.replace("^", "**")
    return _collapse_ws(s)


def _collapse_ws(s: str) -> str:
    return " ".join(s.split())


# ---------------------------------------------------------------------------
# Matching internals


def _match(ref: CanonicalAnswer, cand: CanonicalAnswer, question: str, config: MatchConfig) -> bool:
    if ref.alternatives:
        return _match_disjunction(ref, cand, question, config)
    if cand.alternatives and not ref.alternatives:
        # A disjunctive candidate answers a plain reference only if every
        # branch matches it; otherwise the candidate is hedging.
        return all(_match(ref, branch, question, config) for branch in cand.alternatives)

    if ref.kind == KIND_CHOICE_LABEL:
        return _match_choice(ref, cand, question, config)
    if cand.kind == KIND_CHOICE_LABEL and question:
        options = parse_options(question)
        content = options.get(cand.values[0])
        if content is not None:
            return _match(ref, normalize_answer(content, config), "", config)
        return False

    if ref.kind == KIND_NUMBER:
        return _match_number(ref, cand, config)
    if ref.kind in (KIND_NUMBER_PAIR, KIND_TUPLE):
        return _match_sequence(ref, cand, config)
    if ref.kind == KIND_EXPRESSION:
        return _match_expression(ref, cand, config)
    if ref.kind == KIND_TEXT:
        if cand.kind == KIND_TEXT and ref.values and cand.values:
            return ref.values[0].casefold() == cand.values[0].casefold()
        return False
    return False


def _match_disjunction(
    ref: CanonicalAnswer, cand: CanonicalAnswer, question: str, config: MatchConfig
) -> bool:
    if any(_match(branch, cand, question, config) for branch in ref.alternatives):
        return True
    # A collection candidate matches when it is exactly the set of branches:
    # every branch covered, no extra elements.
    elements = _collection_elements(cand, config)
    if elements is None or len(elements) != len(ref.alternatives):
        return False
    for ordering in permutations(elements):
        if all(
            _match(branch, element, question, config)
            for branch, element in zip(ref.alternatives, ordering)
        ):
            return True
    return False


def _collection_elements(
    cand: CanonicalAnswer, config: MatchConfig
) -> list[CanonicalAnswer] | None:
    if cand.alternatives:
        return list(cand.alternatives)
    if cand.kind in (KIND_TUPLE, KIND_NUMBER_PAIR):
        return [normalize_answer(v, config) for v in cand.values]
    return None


def _match_choice(
    ref: CanonicalAnswer, cand: CanonicalAnswer, question: str, config: MatchConfig
) -> bool:
    if cand.kind == KIND_CHOICE_LABEL:
        return ref.values[0] == cand.values[0]
    options = parse_options(question)
    content = options.get(ref.values[0])
    if content is None:
        return False
    return _match(normalize_answer(content, config), cand, "", config)


def _match_number(ref: CanonicalAnswer, cand: CanonicalAnswer, config: MatchConfig) -> bool:
    ref_value = float(ref.values[0])
    if cand.kind == KIND_NUMBER:
        return _numbers_close(float(cand.values[0]), ref_value, config)
    if cand.kind == KIND_EXPRESSION:
        expr = _parse_sympy(cand.values[0])
        if expr is None:
            return False
        value = _evaluate_constant(expr)
        return value is not None and _numbers_close(value, ref_value, config)
    return False


def _match_sequence(ref: CanonicalAnswer, cand: CanonicalAnswer, config: MatchConfig) -> bool:
    if cand.kind not in (KIND_TUPLE, KIND_NUMBER_PAIR):
        return False
    ref_elems = [normalize_answer(v, config) for v in ref.values]
    cand_elems = [normalize_answer(v, config) for v in cand.values]
    if len(ref_elems) != len(cand_elems):
        return False
    orderless = ref.set_like or cand.set_like
    if not orderless:
        return all(_match(r, c, "", config) for r, c in zip(ref_elems, cand_elems))
    remaining = list(cand_elems)
    for r in ref_elems:
        for i, c in enumerate(remaining):
            if _match(r, c, "", config):
                del remaining[i]
                break
        else:
            return False
    return True


def _match_expression(ref: CanonicalAnswer, cand: CanonicalAnswer, config: MatchConfig) -> bool:
    ref_expr = _parse_sympy(ref.values[0])
    if ref_expr is None:
        return False
    if cand.kind == KIND_EXPRESSION:
        cand_expr = _parse_sympy(cand.values[0])
    elif cand.kind == KIND_NUMBER:
        cand_expr = sympy.Float(float(cand.values[0]))
    else:
        return False
    if cand_expr is None:
        return False
    return _expressions_equivalent(ref_expr, cand_expr, config)


_UNSAFE_EXPR = re.compile(r"__|[,\"'\[\]{}@!#&|<>?~`\\;]")


def _parse_sympy(text: str):
    """Parse bridged expression text; None when it cannot be an expression."""
    if not text or len(text) > 400 or _UNSAFE_EXPR.search(text):
        return None
    try:
        if "=" in text:
            sides = text.split("=")
            if len(sides) != 2:
                return None
            lhs = parse_expr(sides[0], transformations=_PARSE_TRANSFORMATIONS)
            rhs = parse_expr(sides[1], transformations=_PARSE_TRANSFORMATIONS)
            return lhs - rhs
        return parse_expr(text, transformations=_PARSE_TRANSFORMATIONS)
    except Exception:
        return None


def _evaluate_constant(expr) -> float | None:
    try:
        if expr.free_symbols:
            return None
        value = complex(expr.evalf())
    except Exception:
        return None
    if abs(value.imag) > 1e-9 or not math.isfinite(value.real):
        return None
    return value.real


def _expressions_equivalent(e1, e2, config: MatchConfig) -> bool:
    try:
        if e1 == e2:
            return True
    except Exception:
        return False
    symbols = sorted(e1.free_symbols | e2.free_symbols, key=str)
    if not symbols:
        v1, v2 = _evaluate_constant(e1), _evaluate_constant(e2)
        return v1 is not None and v2 is not None and _numbers_close(v1, v2, config)
    # Structural forms differ; decide by evaluating both at sampled points.
    # Points are drawn from a fixed-seed stream in a positive range to stay
    # clear of branch cuts; a pair that never yields comparable values is
    # treated as unbridgeable.
    rng = random.Random(_SAMPLE_SEED)
    good_points = 0
    for _ in range(_MAX_SAMPLE_DRAWS):
        if good_points >= _SAMPLE_POINTS:
            break
        assignment = {sym: sympy.Float(rng.uniform(0.5, 2.5)) for sym in symbols}
        v1 = _evaluate_at(e1, assignment)
        v2 = _evaluate_at(e2, assignment)
        if v1 is None or v2 is None:
            continue
        good_points += 1
        if not _numbers_close(v1, v2, config, floor=1e-9):
            return False
    return good_points >= _SAMPLE_POINTS


def _evaluate_at(expr, assignment) -> float | None:
    try:
        value = complex(expr.evalf(subs=assignment))
    except Exception:
        return None
    if not math.isfinite(value.real) or abs(value.imag) > 1e-9:
        return None
    return value.real


def _numbers_close(a: float, b: float, config: MatchConfig, floor: float = 0.0) -> bool:
    abs_tol = max(config.abs_tol, floor)
    rel_tol = max(config.rel_tol, floor)
    return abs(a - b) <= abs_tol + rel_tol * max(1.0, abs(b))
