"""Critic prompt rendering, judgment parsing, and pluggable scoring backends.

A critic backend labels one candidate triple (question, reference answer,
program, execution result) as Yes or No and attaches a confidence taken from
its first-token probabilities, renormalized over the two verbalized labels.
A deterministic oracle backend built on the heuristic comparator ships for
tests and offline runs; remote backends speak a small batch wire contract
over HTTP.
"""

from __future__ import annotations

import hashlib
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import requests

from .comparator import MatchConfig, em_compare
from .corpus import EXEC_OK, ExecutionOutcome

LABEL_YES = "Yes"
LABEL_NO = "No"

PROMPT_TEMPLATE_VERSION = "1"

# Canonical critic instruction, stored once and hashed into manifests so a
# template change is always visible in provenance.
SYSTEM_PROMPT = (
    "Your goal is to evaluate whether the candidate answer provided by the model "
    "for a math problem matches the reference answer. Here are the steps to "
    "complete the task:\n"
    "-- First, carefully read the given math problem.\n"
    "-- Next, review the reference answer for the math problem.\n"
    "-- Then, examine the candidate answer provided by the model, which may "
    "include a program and the result of running that program.\n"
    "-- Finally, summarize whether the candidate answer matches the reference "
    "answer or can be made to match through simple calculations/conversions.\n"
    "-- The response format should be Yes or No.\n"
)

SECTION_QUESTION = "### Question"
SECTION_REFERENCE = "### Reference Answer"
SECTION_CANDIDATE = "### Candidate Answer"
SECTION_ASSESSMENT = "### Assessment"

CODE_OPEN = "<code>"
CODE_CLOSE = "</code>"
SOLUTION_OPEN = "<solution>"
SOLUTION_CLOSE = "</solution>"
ERROR_OPEN = "<execution_error>"
ERROR_CLOSE = "</execution_error>"


class CriticError(Exception):
    """Critic-level failure for a triple or a backend call."""


class BackendUnavailable(CriticError):
    """Backend unreachable after retries; the run can checkpoint and resume."""


@dataclass(frozen=True)
class CandidateTriple:
    """The critic's input unit: one judged candidate for one question."""

    question_id: str
    question: str
    reference_answer: str
    program_text: str
    outcome: ExecutionOutcome
    sample_index: int = 0

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("question is empty")
        if not self.reference_answer.strip():
            raise ValueError("reference_answer is empty")
        if not self.program_text.strip():
            raise ValueError("program_text is empty")

    @property
    def key(self) -> tuple[str, int]:
        return (self.question_id, self.sample_index)


@dataclass(frozen=True)
class CriticJudgment:
    """Yes/No label with the renormalized probability of the emitted label."""

    label: str
    p_label: float
    parse_warning: bool = False

    def __post_init__(self) -> None:
        if self.label not in (LABEL_YES, LABEL_NO):
            raise ValueError(f"label must be Yes or No, got {self.label!r}")
        if not 0.0 <= self.p_label <= 1.0:
            raise ValueError("p_label must be within [0, 1]")

    @property
    def p_yes(self) -> float:
        return self.p_label if self.label == LABEL_YES else 1.0 - self.p_label

    @property
    def p_no(self) -> float:
        return 1.0 - self.p_yes

    def to_row(self) -> dict[str, Any]:
        return {
            "label": self.label,
            "p_label": self.p_label,
            "p_yes": self.p_yes,
            "parse_warning": self.parse_warning,
        }

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> "CriticJudgment":
        return cls(
            label=str(row["label"]),
            p_label=float(row["p_label"]),
            parse_warning=bool(row.get("parse_warning", False)),
        )


@dataclass(frozen=True)
class BackendReply:
    """Raw per-prompt backend output: decision text plus token probabilities."""

    text: str
    top_tokens: tuple[tuple[str, float], ...] = ()


class CriticBackend(Protocol):
    backend_id: str

    def judge_batch(self, triples: Sequence[CandidateTriple]) -> list["BackendReply | CriticError"]:
        """One reply (or per-triple error) per input triple, in order."""
        ...


def render_prompt(triple: CandidateTriple) -> str:
    """Render the fixed critic instruction for one triple.

    Output is byte-identical for identical input. The program is wrapped in
    code delimiters; an ok execution contributes a solution block, any other
    status contributes an execution-error marker instead.
    """
    outcome = triple.outcome
    if outcome.status == EXEC_OK:
        result_block = f"{SOLUTION_OPEN}{outcome.value}{SOLUTION_CLOSE}"
    else:
        detail = outcome.stderr_excerpt.strip()
        body = outcome.status if not detail else f"{outcome.status}: {detail}"
        result_block = f"{ERROR_OPEN}{body}{ERROR_CLOSE}"
    return (
        f"{SYSTEM_PROMPT}\n"
        f"{SECTION_QUESTION}\n\n{triple.question}\n\n"
        f"{SECTION_REFERENCE}\n\n{triple.reference_answer}\n\n"
        f"{SECTION_CANDIDATE}\n\n"
        f"{CODE_OPEN}{triple.program_text}{CODE_CLOSE}{result_block}\n\n"
        f"{SECTION_ASSESSMENT}\n"
    )


def prompt_template_hash() -> str:
    payload = "\x1e".join(
        (
            PROMPT_TEMPLATE_VERSION,
            SYSTEM_PROMPT,
            SECTION_QUESTION,
            SECTION_REFERENCE,
            SECTION_CANDIDATE,
            SECTION_ASSESSMENT,
        )
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def parse_reply(reply: BackendReply) -> CriticJudgment:
    """Turn a raw backend reply into a judgment.

    The first decision token of the text fixes the label; its probability is
    renormalized over the Yes/No pair. Unparseable text degrades to a No at
    0.5 with a parse warning rather than failing the triple.
    """
    label = _first_decision_token(reply.text)
    if label is None:
        return CriticJudgment(LABEL_NO, 0.5, parse_warning=True)
    p_yes_raw = _token_probability(reply.top_tokens, LABEL_YES)
    p_no_raw = _token_probability(reply.top_tokens, LABEL_NO)
    total = p_yes_raw + p_no_raw
    if total <= 0.0:
        return CriticJudgment(label, 1.0)
    p_label = (p_yes_raw if label == LABEL_YES else p_no_raw) / total
    return CriticJudgment(label, p_label)


def _first_decision_token(text: str) -> str | None:
    # The first Yes/No among the leading tokens decides; anything else is
    # unparseable output.
    for token in re.split(r"[\s.,;:!*\"']+", text)[:8]:
        lowered = token.lower()
        if lowered == "yes":
            return LABEL_YES
        if lowered == "no":
            return LABEL_NO
    return None


def _token_probability(top_tokens: Sequence[tuple[str, float]], label: str) -> float:
    for token, probability in top_tokens:
        if token.strip().lower() == label.lower():
            return max(0.0, float(probability))
    return 0.0


def judge(triple: CandidateTriple, backend: "CriticBackend") -> CriticJudgment:
    """Judge one triple; raises CriticError when the backend fails for it."""
    reply = backend.judge_batch([triple])[0]
    if isinstance(reply, CriticError):
        raise reply
    return parse_reply(reply)


@dataclass
class JudgedTriple:
    triple: CandidateTriple
    judgment: CriticJudgment | None
    error: str = ""


def judge_triples(
    triples: Sequence[CandidateTriple], backend: "CriticBackend"
) -> list[JudgedTriple]:
    """Judge a batch; per-triple failures become error records, not aborts."""
    results: list[JudgedTriple] = []
    for triple, reply in zip(triples, backend.judge_batch(triples)):
        if isinstance(reply, CriticError):
            results.append(JudgedTriple(triple, None, error=str(reply)))
        else:
            results.append(JudgedTriple(triple, parse_reply(reply)))
    return results


@dataclass
class OracleBackend:
    """Comparator-backed critic: exact semantics, certainty one.

    Labels Yes exactly when the execution succeeded and the heuristic
    comparator accepts the value against the reference answer; every non-ok
    execution is a No. Used for tests, offline runs, and as the independent
    reference the trained critic is correlated against.
    """

    config: MatchConfig = field(default_factory=MatchConfig)
    backend_id: str = "oracle"

    def judge_batch(self, triples: Sequence[CandidateTriple]) -> list[BackendReply | CriticError]:
        replies: list[BackendReply | CriticError] = []
        for triple in triples:
            matched = triple.outcome.status == EXEC_OK and em_compare(
                triple.reference_answer,
                triple.outcome.value or "",
                triple.question,
                self.config,
            )
            label = LABEL_YES if matched else LABEL_NO
            p_yes = 1.0 if matched else 0.0
            replies.append(
                BackendReply(label, ((LABEL_YES, p_yes), (LABEL_NO, 1.0 - p_yes)))
            )
        return replies


@dataclass
class ScriptedBackend:
    """Replays a fixed list of replies; deterministic stand-in for tests."""

    replies: Sequence[BackendReply]
    backend_id: str = "scripted"
    _cursor: int = 0

    def judge_batch(self, triples: Sequence[CandidateTriple]) -> list[BackendReply | CriticError]:
        out: list[BackendReply | CriticError] = []
        for _ in triples:
            if self._cursor >= len(self.replies):
                out.append(CriticError("scripted backend exhausted"))
            else:
                out.append(self.replies[self._cursor])
            self._cursor += 1
        return out


@dataclass
class RemoteBackend:
    """HTTP critic client.

    Wire contract: POST a JSON body ``{"backend_id", "prompts": [...],
    "want_token_probabilities": true}``; the response carries one entry per
    prompt under ``results``, each with ``text`` and optional ``top_tokens``
    pairs. Credentials come from the environment, never from config files.
    Chunks fan out concurrently up to ``max_in_flight``; retries happen
    inside each chunk with exponential backoff, so results are reassembled
    in input order no matter how retries interleave. A chunk that exhausts
    its attempts degrades to per-triple error records.
    """

    url: str
    backend_id: str = "remote"
    timeout_s: float = 60.0
    max_attempts: int = 3
    backoff_s: float = 0.5
    chunk_size: int = 16
    max_in_flight: int = 4
    token_env_var: str = "CRITIC_API_TOKEN"
    session: requests.Session | None = None

    def judge_batch(self, triples: Sequence[CandidateTriple]) -> list[BackendReply | CriticError]:
        session = self.session or requests.Session()
        chunks = [
            [render_prompt(t) for t in triples[start : start + self.chunk_size]]
            for start in range(0, len(triples), self.chunk_size)
        ]
        if not chunks:
            return []
        if len(chunks) == 1 or self.max_in_flight <= 1:
            scored = [self._score_chunk(session, prompts) for prompts in chunks]
        else:
            with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
                scored = list(
                    pool.map(lambda prompts: self._score_chunk(session, prompts), chunks)
                )
        results: list[BackendReply | CriticError] = []
        for replies in scored:
            results.extend(replies)
        return results

    def _score_chunk(
        self, session: requests.Session, prompts: list[str]
    ) -> list[BackendReply | CriticError]:
        body = {
            "backend_id": self.backend_id,
            "prompts": prompts,
            "want_token_probabilities": True,
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env_var, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error = "no attempt made"
        for attempt in range(self.max_attempts):
            try:
                response = session.post(self.url, json=body, headers=headers, timeout=self.timeout_s)
                response.raise_for_status()
                payload = response.json()
                return _parse_wire_response(payload, len(prompts))
            except (requests.RequestException, ValueError) as exc:
                last_error = str(exc)
                if attempt + 1 < self.max_attempts:
                    time.sleep(self.backoff_s * (2**attempt))
        error = CriticError(
            f"backend unavailable after {self.max_attempts} attempts: {last_error}"
        )
        return [error] * len(prompts)


def _parse_wire_response(payload: Any, expected: int) -> list[BackendReply | CriticError]:
    if not isinstance(payload, dict) or not isinstance(payload.get("results"), list):
        raise ValueError("malformed backend response: missing results list")
    raw_results = payload["results"]
    if len(raw_results) != expected:
        raise ValueError(
            f"backend returned {len(raw_results)} results for {expected} prompts"
        )
    replies: list[BackendReply | CriticError] = []
    for item in raw_results:
        if not isinstance(item, dict):
            replies.append(CriticError("malformed result entry"))
            continue
        text = str(item.get("text", ""))
        pairs = []
        for pair in item.get("top_tokens", []) or []:
            try:
                token, probability = pair
                pairs.append((str(token), float(probability)))
            except (TypeError, ValueError):
                continue
        replies.append(BackendReply(text, tuple(pairs)))
    return replies


@dataclass
class CriticTrainingSet:
    """Prompt/target records for training a critic, plus balance stats."""

    records: list[dict[str, Any]]
    stats: dict[str, Any]


def build_critic_training_set(
    triples: Sequence[CandidateTriple],
    labeler: "CriticBackend",
    filter_hook: Callable[[CandidateTriple, CriticJudgment], bool] | None = None,
) -> CriticTrainingSet:
    """Label triples and emit (rendered prompt, Yes/No target) records.

    Labeler failures are dropped and counted. The optional filter hook can
    drop additional (triple, judgment) pairs before emission, mirroring an
    external quality-control pass.
    """
    records: list[dict[str, Any]] = []
    failed = 0
    filtered = 0
    yes_count = 0
    for judged in judge_triples(triples, labeler):
        if judged.judgment is None:
            failed += 1
            continue
        if filter_hook is not None and not filter_hook(judged.triple, judged.judgment):
            filtered += 1
            continue
        target = judged.judgment.label
        if target == LABEL_YES:
            yes_count += 1
        records.append(
            {
                "question_id": judged.triple.question_id,
                "prompt": render_prompt(judged.triple),
                "target": target,
            }
        )
    total = len(records)
    stats = {
        "total": total,
        "yes": yes_count,
        "no": total - yes_count,
        "yes_fraction": (yes_count / total) if total else 0.0,
        "labeler_failures": failed,
        "filtered_out": filtered,
        "prompt_template_hash": prompt_template_hash(),
    }
    return CriticTrainingSet(records=records, stats=stats)


def triple_to_row(triple: CandidateTriple) -> dict[str, Any]:
    return {
        "question_id": triple.question_id,
        "question": triple.question,
        "reference_answer": triple.reference_answer,
        "sample_index": triple.sample_index,
        "program_text": triple.program_text,
        "outcome": triple.outcome.semantic_row(),
    }


def triple_from_row(row: dict[str, Any]) -> CandidateTriple:
    return CandidateTriple(
        question_id=str(row["question_id"]),
        question=str(row["question"]),
        reference_answer=str(row["reference_answer"]),
        program_text=str(row["program_text"]),
        outcome=ExecutionOutcome.from_row(row["outcome"]),
        sample_index=int(row.get("sample_index", 0)),
    )
