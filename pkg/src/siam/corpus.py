"""Corpus ingestion, routing, and reproducible persistence.

Dataset files are UTF-8 JSON lines, one record per line, so they stream and
diff cleanly. Every write goes through an atomic temp-file-plus-rename path
and returns the SHA-256 digest of the written bytes; run manifests collect
those digests so a pipeline run can be audited and resumed.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

LANGUAGES = ("zh", "en", "other")
ROUTE_VALUE_STYLE = "value_style"
ROUTE_DIVERSE_FORMAT = "diverse_format"
ROUTES = (ROUTE_VALUE_STYLE, ROUTE_DIVERSE_FORMAT)

EXEC_OK = "ok"
EXEC_RUNTIME_ERROR = "runtime_error"
EXEC_TIMEOUT = "timeout"
EXEC_NO_VALUE = "no_value"
EXEC_STATUSES = (EXEC_OK, EXEC_RUNTIME_ERROR, EXEC_TIMEOUT, EXEC_NO_VALUE)


class CorpusError(Exception):
    """Fatal corpus-level failure (unreadable file, duplicate ids on merge)."""


@dataclass(frozen=True)
class QuestionRecord:
    """One question-answer pair with its scorer route.

    The route is computed once at ingestion and persisted with the record;
    downstream stages trust the stored value so that a later change to answer
    normalization cannot silently reroute old data.
    """

    id: str
    question: str
    reference_answer: str
    language: str = "other"
    source: str = ""
    route: str = ""

    def validate(self) -> list[str]:
        errors = []
        if not self.id.strip():
            errors.append("id is empty")
        if not self.question.strip():
            errors.append("question is empty")
        if not self.reference_answer.strip():
            errors.append("reference_answer is empty")
        if self.language not in LANGUAGES:
            errors.append(f"language {self.language!r} not in {LANGUAGES}")
        if self.route and self.route not in ROUTES:
            errors.append(f"route {self.route!r} not in {ROUTES}")
        return errors

    def to_row(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "reference_answer": self.reference_answer,
            "language": self.language,
            "source": self.source,
            "route": self.route,
        }

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> "QuestionRecord":
        return cls(
            id=str(row.get("id", "")),
            question=str(row.get("question", "")),
            reference_answer=str(row.get("reference_answer", "")),
            language=str(row.get("language", "other")),
            source=str(row.get("source", "")),
            route=str(row.get("route", "")),
        )


@dataclass(frozen=True)
class CodeSample:
    """One sampled candidate program for a question."""

    question_id: str
    sample_index: int
    program_text: str
    generator_id: str = ""
    seed: int = 0

    @property
    def key(self) -> tuple[str, int]:
        return (self.question_id, self.sample_index)

    def to_row(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "sample_index": self.sample_index,
            "program_text": self.program_text,
            "generator_id": self.generator_id,
            "seed": self.seed,
        }

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> "CodeSample":
        return cls(
            question_id=str(row["question_id"]),
            sample_index=int(row["sample_index"]),
            program_text=str(row["program_text"]),
            generator_id=str(row.get("generator_id", "")),
            seed=int(row.get("seed", 0)),
        )


@dataclass(frozen=True)
class ExecutionOutcome:
    """Result of running one candidate program.

    ``value`` is present exactly when ``status == "ok"``. ``wall_time_ms`` is
    telemetry: it is excluded from the semantic view used for reproducibility
    checks and from pipeline stage files.
    """

    status: str
    value: str | None = None
    stderr_excerpt: str = ""
    wall_time_ms: int = 0

    def __post_init__(self) -> None:
        if self.status not in EXEC_STATUSES:
            raise ValueError(f"unknown execution status {self.status!r}")
        if (self.status == EXEC_OK) != (self.value is not None):
            raise ValueError("value must be present iff status is ok")
        if self.wall_time_ms < 0:
            raise ValueError("wall_time_ms must be non-negative")

    def semantic_row(self) -> dict[str, Any]:
        """Projection without timing, stable across reruns and worker counts."""
        return {
            "status": self.status,
            "value": self.value,
            "stderr_excerpt": self.stderr_excerpt,
        }

    def to_row(self) -> dict[str, Any]:
        row = self.semantic_row()
        row["wall_time_ms"] = self.wall_time_ms
        return row

    @classmethod
    def from_row(cls, row: dict[str, Any]) -> "ExecutionOutcome":
        value = row.get("value")
        return cls(
            status=str(row["status"]),
            value=None if value is None else str(value),
            stderr_excerpt=str(row.get("stderr_excerpt", "")),
            wall_time_ms=int(row.get("wall_time_ms", 0)),
        )


@dataclass
class LineError:
    """A rejected input line with its 1-based line number."""

    line_no: int
    message: str


@dataclass
class CorpusLoadResult:
    records: list[QuestionRecord]
    errors: list[LineError] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


def sha256_file(path: str | Path, chunk_size: int = 1 << 20) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def dump_json_line(row: dict[str, Any]) -> str:
    return json.dumps(row, ensure_ascii=False)


def write_jsonl_atomic(path: str | Path, rows: Iterable[dict[str, Any]]) -> str:
    """Write rows as JSON lines via temp file and rename; return SHA-256 hex.

    A failure mid-write leaves no partial file at the target path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hasher = hashlib.sha256()
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            for row in rows:
                data = (dump_json_line(row) + "\n").encode("utf-8")
                hasher.update(data)
                handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise
    return hasher.hexdigest()


def read_jsonl(path: str | Path) -> Iterable[tuple[int, dict[str, Any] | None, str]]:
    """Yield (line_no, row or None, error message) per nonempty line."""
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                yield line_no, None, f"invalid JSON: {exc.msg}"
                continue
            if not isinstance(row, dict):
                yield line_no, None, "line is not a JSON object"
                continue
            yield line_no, row, ""


def partition_by_format(record: QuestionRecord, unit_suffix_numeric: bool = True) -> str:
    """Route a record by its reference answer.

    ``value_style`` when the normalized answer is exactly one or two numeric
    values (checkable by the heuristic comparator); everything else, including
    choice labels, bracketed structures, expressions, and disjunctive answers,
    is ``diverse_format``. A trailing measurement unit still counts as numeric
    by default; that boundary is configuration, not ground truth.
    """
    from .comparator import KIND_NUMBER, KIND_NUMBER_PAIR, MatchConfig, normalize_answer

    config = MatchConfig(unit_suffix_numeric=unit_suffix_numeric)
    canonical = normalize_answer(record.reference_answer, config)
    if canonical.alternatives:
        return ROUTE_DIVERSE_FORMAT
    if canonical.kind in (KIND_NUMBER, KIND_NUMBER_PAIR):
        return ROUTE_VALUE_STYLE
    return ROUTE_DIVERSE_FORMAT


def load_corpus(path: str | Path, unit_suffix_numeric: bool = True) -> CorpusLoadResult:
    """Load question records from a JSONL file.

    Valid records are returned in file order. Malformed lines are skipped and
    reported with their line numbers; an unreadable file raises CorpusError.
    Records missing a route get one assigned here (ingestion time), never
    later.
    """
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    records: list[QuestionRecord] = []
    errors: list[LineError] = []
    seen_ids: set[str] = set()
    for line_no, row, message in read_jsonl(path):
        if row is None:
            errors.append(LineError(line_no, message))
            continue
        record = QuestionRecord.from_row(row)
        problems = record.validate()
        if problems:
            errors.append(LineError(line_no, "; ".join(problems)))
            continue
        if record.id in seen_ids:
            errors.append(LineError(line_no, f"duplicate id {record.id!r}"))
            continue
        seen_ids.add(record.id)
        if not record.route:
            record = QuestionRecord(
                id=record.id,
                question=record.question,
                reference_answer=record.reference_answer,
                language=record.language,
                source=record.source,
                route=partition_by_format(record, unit_suffix_numeric),
            )
        records.append(record)
    return CorpusLoadResult(records=records, errors=errors)


def merge_corpora(results: Sequence[CorpusLoadResult]) -> list[QuestionRecord]:
    """Concatenate corpora, rejecting duplicate ids across files outright."""
    merged: list[QuestionRecord] = []
    seen: set[str] = set()
    for result in results:
        for record in result.records:
            if record.id in seen:
                raise CorpusError(f"duplicate question id across corpus files: {record.id!r}")
            seen.add(record.id)
            merged.append(record)
    return merged


def persist_dataset(
    records: Sequence[Any],
    path: str | Path,
    manifest: "RunManifest | None" = None,
    stage: str = "",
    to_row: Callable[[Any], dict[str, Any]] | None = None,
) -> str:
    """Persist records (anything with ``to_row``) in order; return the digest.

    The write is atomic and order-preserving, so permuting the input changes
    the digest. When a manifest is given, the digest and count are recorded
    under ``stage`` (or the file name).
    """
    path = Path(path)
    row_fn = to_row or (lambda record: record.to_row())
    count = 0

    def rows() -> Iterable[dict[str, Any]]:
        nonlocal count
        for record in records:
            count += 1
            yield row_fn(record)

    digest = write_jsonl_atomic(path, rows())
    if manifest is not None:
        manifest.record_output(stage or path.name, path, digest, count)
    return digest


@dataclass
class RunManifest:
    """Digest-and-count ledger for one pipeline run.

    Re-running with identical config, inputs, and seeds on deterministic
    backends reproduces identical output digests; timestamps are informative
    only and excluded from any equality check.
    """

    config_hash: str = ""
    inputs: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    outputs: dict[str, dict[str, Any]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    stats: dict[str, Any] = field(default_factory=dict)
    created_at: str = ""
    updated_at: str = ""

    def __post_init__(self) -> None:
        if not self.created_at:
            self.created_at = _timestamp()

    def record_input(self, path: str | Path) -> str:
        digest = sha256_file(path)
        self.inputs[str(path)] = digest
        return digest

    def record_output(self, name: str, path: str | Path, digest: str, count: int) -> None:
        self.outputs[name] = {"file": str(path), "digest": digest, "count": count}
        self.counts[name] = count
        self.updated_at = _timestamp()

    def record_count(self, name: str, count: int) -> None:
        self.counts[name] = count

    def to_dict(self) -> dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "inputs": self.inputs,
            "seeds": self.seeds,
            "outputs": self.outputs,
            "counts": self.counts,
            "stats": self.stats,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunManifest":
        manifest = cls(
            config_hash=str(data.get("config_hash", "")),
            inputs=dict(data.get("inputs", {})),
            seeds={k: int(v) for k, v in data.get("seeds", {}).items()},
            outputs=dict(data.get("outputs", {})),
            counts={k: int(v) for k, v in data.get("counts", {}).items()},
            stats=dict(data.get("stats", {})),
            created_at=str(data.get("created_at", "")),
            updated_at=str(data.get("updated_at", "")),
        )
        return manifest

    def save(self, path: str | Path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                handle.write(payload)
            os.replace(tmp_name, path)
        except BaseException:
            try:
                os.unlink(tmp_name)
            except OSError:
                pass
            raise
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))


def config_hash(config: dict[str, Any]) -> str:
    """Order-independent hash of a configuration mapping."""
    canonical = json.dumps(config, ensure_ascii=False, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def derive_seed(base_seed: int, *parts: Any) -> int:
    """Stable 63-bit seed derived from a base seed and context parts."""
    text = json.dumps([base_seed, *[str(p) for p in parts]], ensure_ascii=False)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _timestamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()) + "Z"
