"""Dual-scorer evaluation: exact-match heuristics against the critic.

Scores prediction sets twice, under the rule-based comparator and under a
critic backend, then reports per-dataset accuracy, the tie-corrected
Kendall correlation between the two binary scorings, and response-length
statistics relative to a reference run.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Sequence

from .comparator import MatchConfig, em_compare
from .corpus import EXEC_OK, ExecutionOutcome, QuestionRecord
from .critic import LABEL_YES, CandidateTriple, CriticBackend, judge_triples

SCORER_EM = "em"

_DELIMITER_RE = re.compile(r"</?(?:code|solution|execution_error)>")


@dataclass(frozen=True)
class Prediction:
    """One model response for one question: the program and its execution."""

    program_text: str
    outcome: ExecutionOutcome


@dataclass
class ScoreResult:
    scores: list[int]
    accuracy: float


@dataclass
class ScoredRun:
    """Binary scores for one dataset under both scorers, plus word counts."""

    dataset: str
    em_scores: list[int]
    critic_scores: list[int]
    word_counts: list[int]


@dataclass
class ScorerRow:
    dataset: str
    acc_em: float
    acc_critic: float
    tau: float | None


@dataclass
class ScorerComparisonReport:
    rows: list[ScorerRow]
    macro_acc_em: float
    macro_acc_critic: float
    macro_tau: float | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows": [
                {
                    "dataset": r.dataset,
                    "acc_em": r.acc_em,
                    "acc_critic": r.acc_critic,
                    "tau": r.tau,
                }
                for r in self.rows
            ],
            "macro_acc_em": self.macro_acc_em,
            "macro_acc_critic": self.macro_acc_critic,
            "macro_tau": self.macro_tau,
        }


@dataclass
class LengthReport:
    mean_length: float
    reference_mean: float
    ratio: float | None

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean_length": self.mean_length,
            "reference_mean": self.reference_mean,
            "ratio": self.ratio,
        }


def score_run(
    predictions: Sequence[Prediction],
    references: Sequence[QuestionRecord],
    scorer: "str | CriticBackend" = SCORER_EM,
    match_config: MatchConfig | None = None,
) -> ScoreResult:
    """Binary-score aligned predictions against their reference records.

    ``scorer`` is either the string ``"em"`` for the heuristic comparator or
    a critic backend instance. All scores are 0 or 1; accuracy is their mean.
    """
    if len(predictions) != len(references):
        raise ValueError(
            f"prediction/reference length mismatch: {len(predictions)} vs {len(references)}"
        )
    if not predictions:
        raise ValueError("empty run")
    if scorer == SCORER_EM:
        config = match_config or MatchConfig()
        scores = []
        for prediction, record in zip(predictions, references):
            ok = prediction.outcome.status == EXEC_OK and em_compare(
                record.reference_answer,
                prediction.outcome.value or "",
                record.question,
                config,
            )
            scores.append(1 if ok else 0)
    else:
        triples = [
            CandidateTriple(
                question_id=record.id,
                question=record.question,
                reference_answer=record.reference_answer,
                program_text=prediction.program_text,
                outcome=prediction.outcome,
                sample_index=i,
            )
            for i, (prediction, record) in enumerate(zip(predictions, references))
        ]
        scores = []
        for judged in judge_triples(triples, scorer):
            if judged.judgment is None:
                scores.append(0)
            else:
                scores.append(1 if judged.judgment.label == LABEL_YES else 0)
    return ScoreResult(scores, sum(scores) / len(scores))


def kendall_tau(x: Sequence[int], y: Sequence[int]) -> float | None:
    """Tie-corrected Kendall correlation of two aligned binary score vectors.

    Binary scorers tie massively, so the tie-corrected variant is the only
    one that is not systematically deflated. Returns None (undefined) when
    either vector is constant.
    """
    if len(x) != len(y):
        raise ValueError(f"score vector length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n == 0:
        raise ValueError("empty score vectors")
    for value in list(x) + list(y):
        if value not in (0, 1):
            raise ValueError("scores must be binary (0 or 1)")
    ones_x = sum(x)
    ones_y = sum(y)
    if ones_x in (0, n) or ones_y in (0, n):
        return None
    n11 = sum(1 for a, b in zip(x, y) if a == 1 and b == 1)
    n10 = ones_x - n11
    n01 = ones_y - n11
    n00 = n - n11 - n10 - n01
    concordant = n11 * n00
    discordant = n10 * n01
    pair_total = n * (n - 1) // 2
    ties_x = ones_x * (ones_x - 1) // 2 + (n - ones_x) * (n - ones_x - 1) // 2
    ties_y = ones_y * (ones_y - 1) // 2 + (n - ones_y) * (n - ones_y - 1) // 2
    denominator = math.sqrt((pair_total - ties_x) * (pair_total - ties_y))
    return (concordant - discordant) / denominator


def build_scored_run(
    dataset: str,
    predictions: Sequence[Prediction],
    references: Sequence[QuestionRecord],
    critic_backend: "CriticBackend",
    match_config: MatchConfig | None = None,
) -> ScoredRun:
    em = score_run(predictions, references, SCORER_EM, match_config)
    critic = score_run(predictions, references, critic_backend, match_config)
    counts = [response_word_count(p.program_text) for p in predictions]
    return ScoredRun(dataset, em.scores, critic.scores, counts)


def compare_scorers(runs: Sequence[ScoredRun]) -> ScorerComparisonReport:
    """Per-dataset accuracy under both scorers with their correlation.

    Datasets whose score vectors are constant get an undefined correlation
    and are excluded from the correlation macro-average (accuracies still
    count).
    """
    if not runs:
        raise ValueError("no scored runs")
    rows = []
    for run in runs:
        if len(run.em_scores) != len(run.critic_scores):
            raise ValueError(f"dataset {run.dataset!r}: scorer vectors differ in length")
        if not run.em_scores:
            raise ValueError(f"dataset {run.dataset!r}: empty score vectors")
        acc_em = sum(run.em_scores) / len(run.em_scores)
        acc_critic = sum(run.critic_scores) / len(run.critic_scores)
        rows.append(ScorerRow(run.dataset, acc_em, acc_critic, kendall_tau(run.em_scores, run.critic_scores)))
    defined = [r.tau for r in rows if r.tau is not None]
    return ScorerComparisonReport(
        rows=rows,
        macro_acc_em=sum(r.acc_em for r in rows) / len(rows),
        macro_acc_critic=sum(r.acc_critic for r in rows) / len(rows),
        macro_tau=(sum(defined) / len(defined)) if defined else None,
    )


def response_word_count(text: str) -> int:
    """Whitespace-token word count after dropping result delimiters."""
    return len(_DELIMITER_RE.sub(" ", text).split())


def length_report(
    responses: Sequence[str], reference_responses: Sequence[str]
) -> LengthReport:
    """Mean response length in words, and its ratio to a reference run."""
    if not responses or not reference_responses:
        raise ValueError("both runs must be nonempty")
    mean = _mean_words(responses)
    reference_mean = _mean_words(reference_responses)
    ratio = None if reference_mean == 0 else mean / reference_mean
    return LengthReport(mean, reference_mean, ratio)


def _mean_words(responses: Sequence[str]) -> float:
    return sum(response_word_count(r) for r in responses) / len(responses)


def format_report_table(report: ScorerComparisonReport) -> str:
    """Aligned plain-text table: dataset, both accuracies, correlation."""
    header = ("Dataset", "ACC_EM", "ACC_critic", "Correlation")
    body = [
        (
            row.dataset,
            f"{100 * row.acc_em:.1f}",
            f"{100 * row.acc_critic:.1f}",
            "undefined" if row.tau is None else f"{row.tau:.2f}",
        )
        for row in report.rows
    ]
    body.append(
        (
            "average",
            f"{100 * report.macro_acc_em:.1f}",
            f"{100 * report.macro_acc_critic:.1f}",
            "undefined" if report.macro_tau is None else f"{report.macro_tau:.2f}",
        )
    )
    widths = [max(len(header[i]), *(len(row[i]) for row in body)) for i in range(4)]
    lines = ["  ".join(header[i].ljust(widths[i]) for i in range(4))]
    lines.append("  ".join("-" * widths[i] for i in range(4)))
    for row in body[:-1]:
        lines.append("  ".join(row[i].ljust(widths[i]) for i in range(4)))
    lines.append("  ".join("-" * widths[i] for i in range(4)))
    lines.append("  ".join(body[-1][i].ljust(widths[i]) for i in range(4)))
    return "\n".join(lines)
