"""Dataset construction from judged candidate sets.

Builders turn per-question candidate sets into the four training artifacts:
seed data (iterative resampling of unsolved questions), value-style SFT
(comparator-validated), unfiltered SFT (every Yes-labeled candidate), hard
SFT (one highest-confidence positive per question under confidence and
difficulty thresholds), and preference pairs (highest-scoring Yes against
highest-scoring No). All builders are pure per-question folds: order of
output follows input order, ties break on the lowest sample index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

from .comparator import MatchConfig, em_compare
from .corpus import (
    EXEC_OK,
    CodeSample,
    ExecutionOutcome,
    QuestionRecord,
    derive_seed,
)
from .critic import LABEL_NO, LABEL_YES, CriticJudgment
from .generators import GeneratorBackend

PROVENANCE_SEED = "seed"
PROVENANCE_SELF_DISTILL = "self_distill"
PROVENANCE_VALUE_D1 = "value_d1"
PROVENANCE_CRITIC_D2 = "critic_d2"
PROVENANCES = (
    PROVENANCE_SEED,
    PROVENANCE_SELF_DISTILL,
    PROVENANCE_VALUE_D1,
    PROVENANCE_CRITIC_D2,
)


@dataclass(frozen=True)
class FilterConfig:
    """Thresholds and budgets for dataset construction."""

    lambda1: float = 0.8
    lambda2: int = 3
    keep_limit: int = 4
    samples_per_question: int = 5
    seed_max_iters: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError("lambda1 out of [0, 1]")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.keep_limit < 1:
            raise ValueError("keep_limit must be >= 1")
        if self.samples_per_question < 1:
            raise ValueError("samples_per_question must be >= 1")
        if self.seed_max_iters < 1:
            raise ValueError("seed_max_iters must be >= 1")


@dataclass(frozen=True)
class CandidateEntry:
    sample: CodeSample
    outcome: ExecutionOutcome
    judgment: CriticJudgment | None = None


@dataclass
class CandidateSet:
    """All judged candidates for one question."""

    record: QuestionRecord
    entries: list[CandidateEntry] = field(default_factory=list)

    @property
    def question_id(self) -> str:
        return self.record.id

    def judged_entries(self) -> list[CandidateEntry]:
        missing = [e.sample.sample_index for e in self.entries if e.judgment is None]
        if missing:
            raise ValueError(
                f"candidate set {self.question_id!r} lacks judgments for samples {missing}"
            )
        return self.entries


@dataclass(frozen=True)
class SftRecord:
    question_id: str
    question: str
    program_text: str
    provenance: str
    p_yes: float | None = None
    sample_index: int = 0

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if (self.provenance == PROVENANCE_CRITIC_D2) != (self.p_yes is not None):
            raise ValueError("p_yes present iff provenance is critic_d2")

    def to_row(self) -> dict[str, Any]:
        row = {
            "question_id": self.question_id,
            "question": self.question,
            "program_text": self.program_text,
            "provenance": self.provenance,
            "sample_index": self.sample_index,
        }
        if self.p_yes is not None:
            row["p_yes"] = self.p_yes
        return row

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> "SftRecord":
        p_yes = row.get("p_yes")
        return cls(
            question_id=str(row["question_id"]),
            question=str(row["question"]),
            program_text=str(row["program_text"]),
            provenance=str(row["provenance"]),
            p_yes=None if p_yes is None else float(p_yes),
            sample_index=int(row.get("sample_index", 0)),
        )


@dataclass(frozen=True)
class PreferencePair:
    question_id: str
    question: str
    winning_program: str
    losing_program: str
    p_yes_win: float
    p_yes_lose: float

    def to_row(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "winning_program": self.winning_program,
            "losing_program": self.losing_program,
            "p_yes_win": self.p_yes_win,
            "p_yes_lose": self.p_yes_lose,
        }

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> "PreferencePair":
        return cls(
            question_id=str(row["question_id"]),
            question=str(row["question"]),
            winning_program=str(row["winning_program"]),
            losing_program=str(row["losing_program"]),
            p_yes_win=float(row["p_yes_win"]),
            p_yes_lose=float(row["p_yes_lose"]),
        )


def sample_candidates(
    record: QuestionRecord,
    generator: GeneratorBackend,
    n: int,
    base_seed: int = 0,
    round_index: int = 0,
) -> tuple[list[CodeSample], int]:
    """Draw n candidate programs with recorded per-draw seeds.

    Duplicate program texts are kept (these are samples, not a set). Failed
    draws shrink the list; the failure count is returned for the manifest.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    samples: list[CodeSample] = []
    failures = 0
    for index in range(n):
        seed = derive_seed(base_seed, record.id, round_index, index)
        program = generator.generate(record, index, seed)
        if program is None or not program.strip():
            failures += 1
            continue
        samples.append(
            CodeSample(
                question_id=record.id,
                sample_index=index,
                program_text=program,
                generator_id=generator.generator_id,
                seed=seed,
            )
        )
    return samples, failures


def build_seed(
    records: Sequence[QuestionRecord],
    generator: GeneratorBackend,
    execute: Callable[[Sequence[CodeSample]], dict[tuple[str, int], ExecutionOutcome]],
    config: FilterConfig | None = None,
    match_config: MatchConfig | None = None,
    base_seed: int = 0,
    provenance: str = PROVENANCE_SEED,
) -> list[SftRecord]:
    """Iteratively sample still-unsolved questions, up to seed_max_iters rounds.

    A question is solved once any sample's execution value passes the
    comparator; the solving round contributes every passing program for it.
    """
    config = config or FilterConfig()
    match_config = match_config or MatchConfig()
    unsolved = list(records)
    out: list[SftRecord] = []
    for round_index in range(config.seed_max_iters):
        if not unsolved:
            break
        batch: list[CodeSample] = []
        by_id = {record.id: record for record in unsolved}
        for record in unsolved:
            samples, _ = sample_candidates(
                record, generator, config.samples_per_question, base_seed, round_index
            )
            batch.extend(samples)
        outcomes = execute(batch)
        solved_ids: set[str] = set()
        for sample in batch:
            outcome = outcomes.get(sample.key)
            if outcome is None or outcome.status != EXEC_OK:
                continue
            record = by_id[sample.question_id]
            if em_compare(record.reference_answer, outcome.value or "", record.question, match_config):
                solved_ids.add(sample.question_id)
                out.append(
                    SftRecord(
                        question_id=record.id,
                        question=record.question,
                        program_text=sample.program_text,
                        provenance=provenance,
                        sample_index=sample.sample_index,
                    )
                )
        unsolved = [record for record in unsolved if record.id not in solved_ids]
    return out


def build_value_sft(
    sets: Sequence[CandidateSet],
    config: FilterConfig | None = None,
    match_config: MatchConfig | None = None,
) -> list[SftRecord]:
    """Comparator-validated SFT records for value-style questions.

    Keeps at most keep_limit passing samples per question, lowest sample
    index first.
    """
    config = config or FilterConfig()
    match_config = match_config or MatchConfig()
    out: list[SftRecord] = []
    for candidate_set in sets:
        record = candidate_set.record
        kept = 0
        for entry in sorted(candidate_set.entries, key=lambda e: e.sample.sample_index):
            if kept >= config.keep_limit:
                break
            if entry.outcome.status != EXEC_OK:
                continue
            if not em_compare(
                record.reference_answer, entry.outcome.value or "", record.question, match_config
            ):
                continue
            kept += 1
            out.append(
                SftRecord(
                    question_id=record.id,
                    question=record.question,
                    program_text=entry.sample.program_text,
                    provenance=PROVENANCE_VALUE_D1,
                    sample_index=entry.sample.sample_index,
                )
            )
    return out


def build_sft(sets: Sequence[CandidateSet]) -> list[SftRecord]:
    """Unfiltered SFT set: every Yes-labeled candidate becomes a record."""
    out: list[SftRecord] = []
    for candidate_set in sets:
        record = candidate_set.record
        for entry in sorted(candidate_set.judged_entries(), key=lambda e: e.sample.sample_index):
            if entry.judgment.label != LABEL_YES:
                continue
            out.append(
                SftRecord(
                    question_id=record.id,
                    question=record.question,
                    program_text=entry.sample.program_text,
                    provenance=PROVENANCE_CRITIC_D2,
                    p_yes=entry.judgment.p_yes,
                    sample_index=entry.sample.sample_index,
                )
            )
    return out


def build_sft_hard(
    sets: Sequence[CandidateSet], config: FilterConfig | None = None
) -> list[SftRecord]:
    """Hard-filtered SFT set: at most one record per question.

    The Yes-labeled candidate with the highest confidence is kept only when
    its confidence clears lambda1 and at least lambda2 candidates of the same
    question are labeled No; a question whose candidates are all Yes is
    discarded as too easy.
    """
    config = config or FilterConfig()
    out: list[SftRecord] = []
    for candidate_set in sets:
        record = candidate_set.record
        entries = candidate_set.judged_entries()
        if not entries:
            continue
        yes_entries = [e for e in entries if e.judgment.label == LABEL_YES]
        no_count = sum(1 for e in entries if e.judgment.label == LABEL_NO)
        if not yes_entries or no_count == 0:
            continue
        if no_count < config.lambda2:
            continue
        best = min(
            yes_entries, key=lambda e: (-e.judgment.p_yes, e.sample.sample_index)
        )
        if best.judgment.p_yes <= config.lambda1:
            continue
        out.append(
            SftRecord(
                question_id=record.id,
                question=record.question,
                program_text=best.sample.program_text,
                provenance=PROVENANCE_CRITIC_D2,
                p_yes=best.judgment.p_yes,
                sample_index=best.sample.sample_index,
            )
        )
    return out


def build_dpo_pairs(sets: Sequence[CandidateSet]) -> list[PreferencePair]:
    """One preference pair per question where both labels are present.

    Winner: the highest-confidence Yes. Loser: the highest-confidence No.
    Ties break on the lowest sample index. A pair whose two programs are
    textually identical carries no signal and is skipped.
    """
    out: list[PreferencePair] = []
    for candidate_set in sets:
        record = candidate_set.record
        entries = candidate_set.judged_entries()
        yes_entries = [e for e in entries if e.judgment.label == LABEL_YES]
        no_entries = [e for e in entries if e.judgment.label == LABEL_NO]
        if not yes_entries or not no_entries:
            continue
        winner = min(yes_entries, key=lambda e: (-e.judgment.p_yes, e.sample.sample_index))
        loser = min(no_entries, key=lambda e: (-e.judgment.p_no, e.sample.sample_index))
        if winner.sample.program_text == loser.sample.program_text:
            continue
        out.append(
            PreferencePair(
                question_id=record.id,
                question=record.question,
                winning_program=winner.sample.program_text,
                losing_program=loser.sample.program_text,
                p_yes_win=winner.judgment.p_yes,
                p_yes_lose=loser.judgment.p_yes,
            )
        )
    return out


def group_into_sets(
    records: Sequence[QuestionRecord],
    samples: Iterable[CodeSample],
    outcomes: dict[tuple[str, int], ExecutionOutcome],
    judgments: dict[tuple[str, int], CriticJudgment] | None = None,
) -> list[CandidateSet]:
    """Assemble per-question candidate sets in record order."""
    by_id: dict[str, CandidateSet] = {
        record.id: CandidateSet(record=record) for record in records
    }
    judgments = judgments or {}
    for sample in sorted(samples, key=lambda s: s.key):
        candidate_set = by_id.get(sample.question_id)
        if candidate_set is None:
            continue
        outcome = outcomes.get(sample.key)
        if outcome is None:
            continue
        candidate_set.entries.append(
            CandidateEntry(sample, outcome, judgments.get(sample.key))
        )
    return [by_id[record.id] for record in records]
