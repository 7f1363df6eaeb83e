"""Pluggable program generators for candidate sampling.

The real generator is an external policy model; these backends cover the
pipeline's needs without one: replaying pre-generated samples from a file,
echoing reference answers for smoke runs, and deterministic scripted stubs
for fixtures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .corpus import QuestionRecord, read_jsonl


class GeneratorError(Exception):
    pass


class GeneratorBackend(Protocol):
    generator_id: str

    def generate(self, record: QuestionRecord, sample_index: int, seed: int) -> str | None:
        """Program text for one draw, or None when generation fails."""
        ...


@dataclass
class EchoGenerator:
    """Emits a program whose solution is the reference answer verbatim.

    Every question solves on the first round; useful for smoke-testing the
    pipeline plumbing without a model.
    """

    generator_id: str = "echo"

    def generate(self, record: QuestionRecord, sample_index: int, seed: int) -> str | None:
        answer = record.reference_answer.strip()
        return f"solution = {answer!r}\n"


@dataclass
class FileGenerator:
    """Replays samples produced offline, keyed by (question_id, sample_index)."""

    path: str
    generator_id: str = "file"
    _programs: dict[tuple[str, int], str] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not Path(self.path).is_file():
            raise GeneratorError(f"sample file not found: {self.path}")
        for line_no, row, message in read_jsonl(self.path):
            if row is None:
                raise GeneratorError(f"{self.path}:{line_no}: {message}")
            key = (str(row["question_id"]), int(row["sample_index"]))
            self._programs[key] = str(row["program_text"])

    def generate(self, record: QuestionRecord, sample_index: int, seed: int) -> str | None:
        return self._programs.get((record.id, sample_index))


@dataclass
class StubGenerator:
    """Deterministic scripted generator for fixtures.

    ``programs`` maps question id to the cycle of program texts to emit; the
    draw picks ``programs[id][sample_index % len]``. Missing ids yield
    generation failures.
    """

    programs: dict[str, list[str]]
    generator_id: str = "stub"

    def generate(self, record: QuestionRecord, sample_index: int, seed: int) -> str | None:
        cycle = self.programs.get(record.id)
        if not cycle:
            return None
        return cycle[sample_index % len(cycle)]
