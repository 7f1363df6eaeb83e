"""End-to-end iteration driver: sample, execute, judge, forge, emit.

One iteration turns a routed question corpus into training datasets through
four immutable stages. Each stage writes exactly one output file and records
its digest in the run manifest; a resumed run re-verifies those digests and
recomputes only what is missing, so an interrupted run finishes with
byte-identical outputs. Training itself is out of process: the run emits the
datasets plus a handoff descriptor naming the loss kind and hyperparameters.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .align import LOSS_KINDS, LossConfig
from .comparator import MatchConfig
from .corpus import (
    ROUTE_DIVERSE_FORMAT,
    ROUTE_VALUE_STYLE,
    CodeSample,
    CorpusError,
    ExecutionOutcome,
    QuestionRecord,
    RunManifest,
    config_hash,
    load_corpus,
    merge_corpora,
    read_jsonl,
    sha256_file,
    write_jsonl_atomic,
)
from .critic import (
    BackendUnavailable,
    CandidateTriple,
    CriticBackend,
    CriticJudgment,
    OracleBackend,
    RemoteBackend,
    judge_triples,
    prompt_template_hash,
)
from .executor import ExecLimits, ExecTask, InterpreterSpec, execute_batch
from .forge import (
    FilterConfig,
    build_dpo_pairs,
    build_sft,
    build_sft_hard,
    build_value_sft,
    group_into_sets,
    sample_candidates,
)
from .generators import EchoGenerator, FileGenerator, GeneratorBackend

STAGE_SAMPLED = "sampled"
STAGE_EXECUTED = "executed"
STAGE_JUDGED = "judged"
STAGE_FORGED = "forged"
STAGES = (STAGE_SAMPLED, STAGE_EXECUTED, STAGE_JUDGED, STAGE_FORGED)

DATASET_FILES = {
    "value_sft": "datasets/value_sft.jsonl",
    "sft": "datasets/sft.jsonl",
    "sft_hard": "datasets/sft_hard.jsonl",
    "dpo_pairs": "datasets/dpo_pairs.jsonl",
}

_STAGE_FILES = {
    STAGE_SAMPLED: "samples/samples.jsonl",
    STAGE_EXECUTED: "outcomes/outcomes.jsonl",
    STAGE_JUDGED: "judgments/judgments.jsonl",
}


class ConfigError(Exception):
    """One or more configuration violations; carries the full list."""

    def __init__(self, errors: Sequence[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


class ResumableInterruption(Exception):
    """The run stopped at a checkpoint and can be resumed."""


class RunLockError(Exception):
    pass


@dataclass
class IterationConfig:
    iteration: int
    output_dir: Path
    seed: int
    corpus_paths: list[Path]
    generator_spec: dict[str, Any]
    critic_spec: dict[str, Any]
    filters: FilterConfig
    limits: ExecLimits
    match: MatchConfig
    loss: LossConfig
    raw: dict[str, Any] = field(default_factory=dict)

    def hash(self) -> str:
        return config_hash(self.raw)


@dataclass
class RunResult:
    run_dir: Path
    manifest: RunManifest
    completed_stage: str


def load_config_file(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as handle:
        return tomllib.load(handle)


def validate_config(source: str | Path | dict[str, Any]) -> IterationConfig:
    """Normalize a configuration mapping, listing every violation at once."""
    if isinstance(source, (str, Path)):
        base_dir = Path(source).resolve().parent
        try:
            data = load_config_file(source)
        except FileNotFoundError:
            raise ConfigError([f"config file not found: {source}"])
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"config file is not valid TOML: {exc}"])
    else:
        base_dir = Path.cwd()
        data = dict(source)

    errors: list[str] = []

    def section(name: str) -> dict[str, Any]:
        value = data.get(name, {})
        if not isinstance(value, dict):
            errors.append(f"[{name}] must be a table")
            return {}
        return value

    run = section("run")
    corpus = section("corpus")
    generator = section("generator")
    critic = section("critic")
    filters = section("filter")
    exec_section = section("exec")
    match = section("match")
    loss = section("loss")

    iteration = _as_int(run.get("iteration", 0), "run.iteration", errors)
    if iteration is not None and iteration < 0:
        errors.append("run.iteration must be >= 0")
    seed = _as_int(run.get("seed", 0), "run.seed", errors)
    output_dir = run.get("output_dir")
    if not output_dir:
        errors.append("run.output_dir is missing")

    raw_paths = corpus.get("paths", [])
    if not raw_paths:
        errors.append("corpus.paths is missing or empty")
    corpus_paths: list[Path] = []
    for raw_path in raw_paths:
        path = Path(raw_path)
        if not path.is_absolute():
            path = base_dir / path
        if not path.is_file():
            errors.append(f"corpus path does not exist: {raw_path}")
        corpus_paths.append(path)

    generator_kind = str(generator.get("kind", "echo"))
    if generator_kind not in ("echo", "file"):
        errors.append(f"generator.kind must be echo or file, got {generator_kind!r}")
    generator_spec = dict(generator)
    generator_spec["kind"] = generator_kind
    if generator_kind == "file":
        sample_path = generator.get("path")
        if not sample_path:
            errors.append("generator.path is required for generator.kind = file")
        else:
            path = Path(sample_path)
            if not path.is_absolute():
                path = base_dir / path
            if not path.is_file():
                errors.append(f"generator.path does not exist: {sample_path}")
            generator_spec["path"] = str(path)

    critic_backend = str(critic.get("backend", "oracle"))
    if critic_backend not in ("oracle", "remote"):
        errors.append(f"critic.backend must be oracle or remote, got {critic_backend!r}")
    if critic_backend == "remote" and not critic.get("url"):
        errors.append("critic.url is required for critic.backend = remote")
    critic_spec = dict(critic)
    critic_spec["backend"] = critic_backend

    lambda1 = _as_float(filters.get("lambda1", 0.8), "filter.lambda1", errors)
    if lambda1 is not None and not 0.0 <= lambda1 <= 1.0:
        errors.append("filter.lambda1 out of [0, 1]")
    lambda2 = _as_int(filters.get("lambda2", 3), "filter.lambda2", errors)
    if lambda2 is not None and lambda2 < 0:
        errors.append("filter.lambda2 must be >= 0")
    keep_limit = _as_int(filters.get("keep_limit", 4), "filter.keep_limit", errors)
    if keep_limit is not None and keep_limit < 1:
        errors.append("filter.keep_limit must be >= 1")
    n = _as_int(filters.get("samples_per_question", 5), "filter.samples_per_question", errors)
    if n is not None and n < 1:
        errors.append("filter.samples_per_question must be >= 1")
    seed_max_iters = _as_int(filters.get("seed_max_iters", 3), "filter.seed_max_iters", errors)
    if seed_max_iters is not None and seed_max_iters < 1:
        errors.append("filter.seed_max_iters must be >= 1")

    wall_time_ms = _as_int(exec_section.get("wall_time_ms", 10_000), "exec.wall_time_ms", errors)
    if wall_time_ms is not None and wall_time_ms < 100:
        errors.append("exec.wall_time_ms must be >= 100")
    max_output = _as_int(exec_section.get("max_output_bytes", 65_536), "exec.max_output_bytes", errors)
    if max_output is not None and max_output < 1:
        errors.append("exec.max_output_bytes must be >= 1")
    workers = _as_int(exec_section.get("workers", 8), "exec.workers", errors)
    if workers is not None and workers < 1:
        errors.append("exec.workers must be >= 1")

    abs_tol = _as_float(match.get("abs_tol", 1e-6), "match.abs_tol", errors)
    rel_tol = _as_float(match.get("rel_tol", 1e-6), "match.rel_tol", errors)
    for name, tol in (("match.abs_tol", abs_tol), ("match.rel_tol", rel_tol)):
        if tol is not None and tol < 0:
            errors.append(f"{name} must be >= 0")

    loss_kind = str(loss.get("kind", "dpo_sft"))
    if loss_kind not in LOSS_KINDS:
        errors.append(f"loss.kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    beta = _as_float(loss.get("beta", 0.1), "loss.beta", errors)
    if beta is not None and beta <= 0:
        errors.append("loss.beta must be > 0")
    sft_weight = _as_float(loss.get("sft_weight", 1.0), "loss.sft_weight", errors)
    if sft_weight is not None and sft_weight < 0:
        errors.append("loss.sft_weight must be >= 0")

    if errors:
        raise ConfigError(errors)

    # output_dir is where the run lands, not what the run computes; it stays
    # out of the config hash so runs in different directories compare equal.
    normalized_raw = {
        "run": {"iteration": iteration, "seed": seed},
        "corpus": {"paths": [str(p) for p in corpus_paths]},
        "generator": generator_spec,
        "critic": {k: v for k, v in critic_spec.items() if k != "credentials"},
        "filter": {
            "lambda1": lambda1,
            "lambda2": lambda2,
            "keep_limit": keep_limit,
            "samples_per_question": n,
            "seed_max_iters": seed_max_iters,
        },
        "exec": {
            "wall_time_ms": wall_time_ms,
            "max_output_bytes": max_output,
            "workers": workers,
        },
        "match": {"abs_tol": abs_tol, "rel_tol": rel_tol},
        "loss": {"kind": loss_kind, "beta": beta, "sft_weight": sft_weight},
    }
    output_path = Path(output_dir)
    if not output_path.is_absolute():
        output_path = base_dir / output_path
    return IterationConfig(
        iteration=iteration,
        output_dir=output_path,
        seed=seed,
        corpus_paths=corpus_paths,
        generator_spec=generator_spec,
        critic_spec=critic_spec,
        filters=FilterConfig(
            lambda1=lambda1,
            lambda2=lambda2,
            keep_limit=keep_limit,
            samples_per_question=n,
            seed_max_iters=seed_max_iters,
        ),
        limits=ExecLimits(
            wall_time_ms=wall_time_ms,
            max_output_bytes=max_output,
            worker_count=workers,
        ),
        match=MatchConfig(abs_tol=abs_tol, rel_tol=rel_tol),
        loss=LossConfig(beta=beta, sft_weight=sft_weight, loss_kind=loss_kind),
        raw=normalized_raw,
    )


def _as_int(value: Any, name: str, errors: list[str]) -> int | None:
    try:
        if isinstance(value, bool):
            raise TypeError
        return int(value)
    except (TypeError, ValueError):
        errors.append(f"{name} must be an integer, got {value!r}")
        return None


def _as_float(value: Any, name: str, errors: list[str]) -> float | None:
    try:
        if isinstance(value, bool):
            raise TypeError
        return float(value)
    except (TypeError, ValueError):
        errors.append(f"{name} must be a number, got {value!r}")
        return None


def build_generator(config: IterationConfig) -> GeneratorBackend:
    spec = config.generator_spec
    if spec["kind"] == "file":
        return FileGenerator(path=spec["path"])
    return EchoGenerator()


def build_critic(config: IterationConfig) -> CriticBackend:
    spec = config.critic_spec
    if spec["backend"] == "remote":
        return RemoteBackend(
            url=str(spec["url"]),
            backend_id=str(spec.get("backend_id", "remote")),
            timeout_s=float(spec.get("timeout_s", 60.0)),
            max_attempts=int(spec.get("max_attempts", 3)),
        )
    return OracleBackend(config=config.match)


class _RunLock:
    """Single-writer lock on a run directory."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"
        self._fd: int | None = None

    def __enter__(self) -> "_RunLock":
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockError(f"run directory is locked by another writer: {self.path}")
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc_info: Any) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            os.unlink(self.path)
        except OSError:
            pass


def run_iteration(
    config: IterationConfig,
    generator: GeneratorBackend | None = None,
    critic_backend: CriticBackend | None = None,
    resume: bool = False,
    stop_after: str | None = None,
) -> RunResult:
    """Run one iteration into the configured run directory.

    With ``resume`` the manifest's completed stages are verified by digest
    and reused; partial stage outputs are never consumed. ``stop_after``
    checkpoints after the named stage, standing in for an interruption.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ValueError(f"stop_after must be one of {STAGES}")
    run_dir = config.output_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    for sub in ("samples", "outcomes", "judgments", "datasets"):
        (run_dir / sub).mkdir(exist_ok=True)

    generator = generator or build_generator(config)
    critic_backend = critic_backend or build_critic(config)

    with _RunLock(run_dir):
        manifest_path = run_dir / "manifest.json"
        manifest = _load_or_init_manifest(manifest_path, config, resume)

        records = merge_corpora([load_corpus(p) for p in config.corpus_paths])
        for path in config.corpus_paths:
            manifest.inputs[str(path)] = sha256_file(path)
        manifest.stats["questions"] = len(records)
        manifest.stats["route_value_style"] = sum(
            1 for r in records if r.route == ROUTE_VALUE_STYLE
        )
        manifest.stats["route_diverse_format"] = sum(
            1 for r in records if r.route == ROUTE_DIVERSE_FORMAT
        )

        completed = _verified_stages(manifest, run_dir) if resume else []

        samples = _stage_sampled(run_dir, manifest, config, records, generator, completed)
        if stop_after == STAGE_SAMPLED:
            manifest.save(manifest_path)
            return RunResult(run_dir, manifest, STAGE_SAMPLED)

        outcomes = _stage_executed(run_dir, manifest, config, samples, completed)
        if stop_after == STAGE_EXECUTED:
            manifest.save(manifest_path)
            return RunResult(run_dir, manifest, STAGE_EXECUTED)

        try:
            judgments = _stage_judged(
                run_dir, manifest, records, samples, outcomes, critic_backend, completed
            )
        except BackendUnavailable:
            manifest.save(manifest_path)
            raise ResumableInterruption(
                "critic backend unavailable; run checkpointed after execute stage"
            )
        if stop_after == STAGE_JUDGED:
            manifest.save(manifest_path)
            return RunResult(run_dir, manifest, STAGE_JUDGED)

        _stage_forged(run_dir, manifest, config, records, samples, outcomes, judgments, completed)
        manifest.save(manifest_path)
        return RunResult(run_dir, manifest, STAGE_FORGED)


def _load_or_init_manifest(
    manifest_path: Path, config: IterationConfig, resume: bool
) -> RunManifest:
    current_hash = config.hash()
    if resume and manifest_path.is_file():
        manifest = RunManifest.load(manifest_path)
        if manifest.config_hash != current_hash:
            raise ConfigError(
                ["resume refused: configuration differs from the checkpointed run"]
            )
        return manifest
    manifest = RunManifest(config_hash=current_hash)
    manifest.seeds["run_seed"] = config.seed
    manifest.stats["iteration"] = config.iteration
    manifest.stats["prompt_template_hash"] = prompt_template_hash()
    return manifest


def _verified_stages(manifest: RunManifest, run_dir: Path) -> list[str]:
    """Longest prefix of stages whose recorded outputs still verify."""
    verified: list[str] = []
    for stage in STAGES:
        names = list(DATASET_FILES) + ["handoff"] if stage == STAGE_FORGED else [stage]
        ok = True
        for name in names:
            entry = manifest.outputs.get(name)
            if entry is None:
                ok = False
                break
            path = run_dir / Path(entry["file"])
            if not path.is_file() or sha256_file(path) != entry["digest"]:
                ok = False
                break
        if not ok:
            break
        verified.append(stage)
    return verified


def _stage_sampled(
    run_dir: Path,
    manifest: RunManifest,
    config: IterationConfig,
    records: Sequence[QuestionRecord],
    generator: GeneratorBackend,
    completed: list[str],
) -> list[CodeSample]:
    path = run_dir / _STAGE_FILES[STAGE_SAMPLED]
    if STAGE_SAMPLED in completed:
        return _load_samples(path)
    samples: list[CodeSample] = []
    failures = 0
    for record in sorted(records, key=lambda r: r.id):
        drawn, failed = sample_candidates(
            record, generator, config.filters.samples_per_question, config.seed
        )
        samples.extend(drawn)
        failures += failed
    digest = write_jsonl_atomic(path, (s.to_row() for s in samples))
    manifest.record_output(STAGE_SAMPLED, _STAGE_FILES[STAGE_SAMPLED], digest, len(samples))
    manifest.stats["generator_failures"] = failures
    return samples


def _load_samples(path: Path) -> list[CodeSample]:
    samples = []
    for line_no, row, message in read_jsonl(path):
        if row is None:
            raise CorpusError(f"{path}:{line_no}: {message}")
        samples.append(CodeSample.from_row(row))
    return samples


def _stage_executed(
    run_dir: Path,
    manifest: RunManifest,
    config: IterationConfig,
    samples: Sequence[CodeSample],
    completed: list[str],
    interpreter: InterpreterSpec | None = None,
) -> dict[tuple[str, int], ExecutionOutcome]:
    path = run_dir / _STAGE_FILES[STAGE_EXECUTED]
    if STAGE_EXECUTED in completed:
        return _load_outcomes(path)
    tasks = [
        ExecTask(sample.question_id, sample.sample_index, sample.program_text)
        for sample in samples
    ]
    outcomes = execute_batch(tasks, config.limits, interpreter or InterpreterSpec())
    rows = [
        {"question_id": qid, "sample_index": idx, **outcome.semantic_row()}
        for (qid, idx), outcome in outcomes.items()
    ]
    digest = write_jsonl_atomic(path, rows)
    manifest.record_output(STAGE_EXECUTED, _STAGE_FILES[STAGE_EXECUTED], digest, len(rows))
    by_status: dict[str, int] = {}
    total_ms = 0
    for outcome in outcomes.values():
        by_status[outcome.status] = by_status.get(outcome.status, 0) + 1
        total_ms += outcome.wall_time_ms
    manifest.stats["execution_status_counts"] = by_status
    manifest.stats["execution_total_wall_ms"] = total_ms
    return outcomes


def _load_outcomes(path: Path) -> dict[tuple[str, int], ExecutionOutcome]:
    outcomes: dict[tuple[str, int], ExecutionOutcome] = {}
    for line_no, row, message in read_jsonl(path):
        if row is None:
            raise CorpusError(f"{path}:{line_no}: {message}")
        key = (str(row["question_id"]), int(row["sample_index"]))
        outcomes[key] = ExecutionOutcome.from_row(row)
    return outcomes


def _stage_judged(
    run_dir: Path,
    manifest: RunManifest,
    records: Sequence[QuestionRecord],
    samples: Sequence[CodeSample],
    outcomes: dict[tuple[str, int], ExecutionOutcome],
    critic_backend: CriticBackend,
    completed: list[str],
) -> dict[tuple[str, int], CriticJudgment]:
    path = run_dir / _STAGE_FILES[STAGE_JUDGED]
    if STAGE_JUDGED in completed:
        return _load_judgments(path)
    diverse = {r.id: r for r in records if r.route == ROUTE_DIVERSE_FORMAT}
    triples: list[CandidateTriple] = []
    for sample in sorted(samples, key=lambda s: s.key):
        record = diverse.get(sample.question_id)
        outcome = outcomes.get(sample.key)
        if record is None or outcome is None:
            continue
        triples.append(
            CandidateTriple(
                question_id=record.id,
                question=record.question,
                reference_answer=record.reference_answer,
                program_text=sample.program_text,
                outcome=outcome,
                sample_index=sample.sample_index,
            )
        )
    judged = judge_triples(triples, critic_backend)
    failures = [j for j in judged if j.judgment is None]
    if triples and len(failures) == len(triples):
        raise BackendUnavailable(failures[0].error or "all judgments failed")
    rows = []
    judgments: dict[tuple[str, int], CriticJudgment] = {}
    for item in judged:
        if item.judgment is None:
            continue
        judgments[item.triple.key] = item.judgment
        rows.append(
            {
                "question_id": item.triple.question_id,
                "sample_index": item.triple.sample_index,
                **item.judgment.to_row(),
            }
        )
    digest = write_jsonl_atomic(path, rows)
    manifest.record_output(STAGE_JUDGED, _STAGE_FILES[STAGE_JUDGED], digest, len(rows))
    manifest.stats["judge_failures"] = len(failures)
    return judgments


def _load_judgments(path: Path) -> dict[tuple[str, int], CriticJudgment]:
    judgments: dict[tuple[str, int], CriticJudgment] = {}
    for line_no, row, message in read_jsonl(path):
        if row is None:
            raise CorpusError(f"{path}:{line_no}: {message}")
        key = (str(row["question_id"]), int(row["sample_index"]))
        judgments[key] = CriticJudgment.from_row(row)
    return judgments


def _stage_forged(
    run_dir: Path,
    manifest: RunManifest,
    config: IterationConfig,
    records: Sequence[QuestionRecord],
    samples: Sequence[CodeSample],
    outcomes: dict[tuple[str, int], ExecutionOutcome],
    judgments: dict[tuple[str, int], CriticJudgment],
    completed: list[str],
) -> None:
    if STAGE_FORGED in completed:
        return
    ordered = sorted(records, key=lambda r: r.id)
    value_records = [r for r in ordered if r.route == ROUTE_VALUE_STYLE]
    diverse_records = [r for r in ordered if r.route == ROUTE_DIVERSE_FORMAT]
    value_sets = group_into_sets(value_records, samples, outcomes)
    diverse_sets = group_into_sets(diverse_records, samples, outcomes, judgments)

    datasets = {
        "value_sft": build_value_sft(value_sets, config.filters, config.match),
        "sft": build_sft(diverse_sets),
        "sft_hard": build_sft_hard(diverse_sets, config.filters),
        "dpo_pairs": build_dpo_pairs(diverse_sets),
    }
    for name, dataset in datasets.items():
        digest = write_jsonl_atomic(run_dir / DATASET_FILES[name], (r.to_row() for r in dataset))
        manifest.record_output(name, DATASET_FILES[name], digest, len(dataset))

    handoff_path = run_dir / "datasets" / "handoff.json"
    handoff = {
        "iteration": config.iteration,
        "loss": {
            "kind": config.loss.loss_kind,
            "beta": config.loss.beta,
            "sft_weight": config.loss.sft_weight,
        },
        "datasets": {
            name: manifest.outputs[name] for name in datasets
        },
        "prompt_template_hash": prompt_template_hash(),
        "config_hash": manifest.config_hash,
    }
    payload = json.dumps(handoff, ensure_ascii=False, indent=2, sort_keys=True)
    tmp = handoff_path.with_suffix(".json.tmp")
    tmp.write_text(payload, encoding="utf-8")
    os.replace(tmp, handoff_path)
    manifest.record_output("handoff", "datasets/handoff.json", sha256_file(handoff_path), 1)


def verify_run(run_dir: str | Path, records: Sequence[QuestionRecord]) -> list[str]:
    """Conservation checks over a finished run directory via id joins."""
    run_dir = Path(run_dir)
    problems: list[str] = []
    known_ids = {r.id for r in records}

    samples = _load_samples(run_dir / _STAGE_FILES[STAGE_SAMPLED])
    sample_keys = {s.key for s in samples}
    for sample in samples:
        if sample.question_id not in known_ids:
            problems.append(f"sample {sample.key} references unknown question")

    outcome_keys = set(_load_outcomes(run_dir / _STAGE_FILES[STAGE_EXECUTED]))
    if outcome_keys != sample_keys:
        problems.append("executed outcomes do not cover exactly the sampled programs")

    judged_keys = set(_load_judgments(run_dir / _STAGE_FILES[STAGE_JUDGED]))
    if not judged_keys <= outcome_keys:
        problems.append("judgments reference unexecuted samples")

    for name, rel_path in DATASET_FILES.items():
        for line_no, row, message in read_jsonl(run_dir / rel_path):
            if row is None:
                problems.append(f"{rel_path}:{line_no}: {message}")
                continue
            if str(row["question_id"]) not in known_ids:
                problems.append(f"{rel_path}:{line_no}: unknown question id")
    return problems
