"""Command-line entry points.

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 resumable
interruption.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .align import LOSS_KINDS, gradient_check
from .comparator import MatchConfig, em_compare
from .corpus import (
    CodeSample,
    CorpusError,
    ExecutionOutcome,
    QuestionRecord,
    load_corpus,
    read_jsonl,
    write_jsonl_atomic,
)
from .critic import (
    CriticJudgment,
    OracleBackend,
    RemoteBackend,
    judge_triples,
    triple_from_row,
)
from .evalbench import ScoredRun, compare_scorers, format_report_table
from .executor import ExecLimits, ExecTask, ExecutorConfigError, execute_batch
from .forge import (
    CandidateEntry,
    CandidateSet,
    FilterConfig,
    build_dpo_pairs,
    build_seed,
    build_sft,
    build_sft_hard,
)
from .generators import EchoGenerator, FileGenerator
from .orchestrator import (
    ConfigError,
    ResumableInterruption,
    RunLockError,
    STAGES,
    run_iteration,
    validate_config,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_RESUMABLE = 3


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "handler"):
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.handler(args)
    except (ConfigError, CorpusError, ExecutorConfigError, RunLockError) as exc:
        _print_config_error(exc)
        return EXIT_CONFIG
    except ResumableInterruption as exc:
        print(f"interrupted: {exc}", file=sys.stderr)
        return EXIT_RESUMABLE


def _print_config_error(exc: Exception) -> None:
    if isinstance(exc, ConfigError):
        for error in exc.errors:
            print(f"config error: {error}", file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siam", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command")

    exec_parser = sub.add_parser("exec", help="sandboxed program execution")
    exec_sub = exec_parser.add_subparsers(dest="subcommand")
    exec_run = exec_sub.add_parser("run", help="execute a task batch")
    exec_run.add_argument("--in", dest="input", required=True)
    exec_run.add_argument("--out", dest="output", required=True)
    exec_run.add_argument("--workers", type=int, default=8)
    exec_run.add_argument("--timeout-ms", type=int, default=10_000)
    exec_run.add_argument("--max-output-bytes", type=int, default=65_536)
    exec_run.add_argument(
        "--interpreter",
        default="",
        help='command template with a {program} placeholder, e.g. "python3 -I {program}"',
    )
    exec_run.set_defaults(handler=cmd_exec_run)

    compare_parser = sub.add_parser("compare", help="heuristic answer comparison")
    compare_sub = compare_parser.add_subparsers(dest="subcommand")
    compare_run = compare_sub.add_parser("run", help="run a fixture file")
    compare_run.add_argument("--fixtures", required=True)
    compare_run.add_argument("--abs-tol", type=float, default=1e-6)
    compare_run.add_argument("--rel-tol", type=float, default=1e-6)
    compare_run.set_defaults(handler=cmd_compare_run)

    critic_parser = sub.add_parser("critic", help="critic judging")
    critic_sub = critic_parser.add_subparsers(dest="subcommand")
    critic_judge = critic_sub.add_parser("judge", help="judge candidate triples")
    critic_judge.add_argument("--in", dest="input", required=True)
    critic_judge.add_argument("--out", dest="output", required=True)
    critic_judge.add_argument("--backend", choices=("oracle", "remote"), default="oracle")
    critic_judge.add_argument("--url", default="")
    critic_judge.add_argument("--backend-id", default="remote")
    critic_judge.set_defaults(handler=cmd_critic_judge)

    forge_parser = sub.add_parser("forge", help="dataset construction")
    forge_sub = forge_parser.add_subparsers(dest="subcommand")
    for name in ("sft", "sft-hard", "dpo", "seed"):
        forge_cmd = forge_sub.add_parser(name)
        forge_cmd.add_argument("--in", dest="input", required=True)
        forge_cmd.add_argument("--config", default="")
        forge_cmd.add_argument("--out", dest="output", required=True)
        forge_cmd.set_defaults(handler=cmd_forge, dataset_kind=name)

    loss_parser = sub.add_parser("loss", help="loss kernels")
    loss_sub = loss_parser.add_subparsers(dest="subcommand")
    loss_check = loss_sub.add_parser("check", help="analytic-vs-numeric gradient check")
    loss_check.add_argument("--kind", choices=LOSS_KINDS, default="dpo_sft")
    loss_check.add_argument("--trials", type=int, default=100)
    loss_check.add_argument("--seed", type=int, default=0)
    loss_check.set_defaults(handler=cmd_loss_check)

    eval_parser = sub.add_parser("eval", help="dual-scorer evaluation")
    eval_sub = eval_parser.add_subparsers(dest="subcommand")
    eval_compare = eval_sub.add_parser("compare", help="compare EM and critic scorings")
    eval_compare.add_argument("--runs", required=True, help="directory of scored-run JSONL files")
    eval_compare.add_argument("--out", dest="output", required=True)
    eval_compare.set_defaults(handler=cmd_eval_compare)

    run_parser = sub.add_parser("run", help="run one pipeline iteration")
    run_parser.add_argument("--config", required=True)
    run_parser.add_argument("--resume", action="store_true")
    run_parser.add_argument("--stop-after", choices=STAGES, default=None)
    run_parser.set_defaults(handler=cmd_run)

    validate_parser = sub.add_parser("validate", help="validate a run configuration")
    validate_parser.add_argument("--config", required=True)
    validate_parser.set_defaults(handler=cmd_validate)

    return parser


def cmd_exec_run(args: argparse.Namespace) -> int:
    limits = ExecLimits(
        wall_time_ms=args.timeout_ms,
        max_output_bytes=args.max_output_bytes,
        worker_count=args.workers,
    )
    tasks = []
    for line_no, row, message in read_jsonl(args.input):
        if row is None:
            print(f"{args.input}:{line_no}: {message}", file=sys.stderr)
            continue
        tasks.append(
            ExecTask(str(row["question_id"]), int(row["sample_index"]), str(row["program_text"]))
        )
    if args.interpreter:
        from .executor import InterpreterSpec

        command = tuple(args.interpreter.split())
        interpreter = InterpreterSpec(command=command, python_harness="python" in command[0])
        outcomes = execute_batch(tasks, limits, interpreter)
    else:
        outcomes = execute_batch(tasks, limits)
    rows = [
        {"question_id": qid, "sample_index": idx, **outcome.to_row()}
        for (qid, idx), outcome in outcomes.items()
    ]
    write_jsonl_atomic(args.output, rows)
    by_status: dict[str, int] = {}
    for outcome in outcomes.values():
        by_status[outcome.status] = by_status.get(outcome.status, 0) + 1
    print(f"executed {len(rows)} tasks: {json.dumps(by_status, sort_keys=True)}")
    return EXIT_OK


def cmd_compare_run(args: argparse.Namespace) -> int:
    config = MatchConfig(abs_tol=args.abs_tol, rel_tol=args.rel_tol)
    total = 0
    failures = 0
    for line_no, row, message in read_jsonl(args.fixtures):
        if row is None:
            print(f"{args.fixtures}:{line_no}: {message}", file=sys.stderr)
            failures += 1
            continue
        total += 1
        expected = bool(row["expected"])
        got = em_compare(
            str(row["reference"]), str(row["candidate"]), str(row.get("question", "")), config
        )
        status = "PASS" if got == expected else "FAIL"
        if got != expected:
            failures += 1
        print(
            f"{status}  ref={row['reference']!r}  cand={row['candidate']!r}"
            f"  expected={expected}  got={got}"
        )
    print(f"{total - failures}/{total} fixtures passed")
    return EXIT_OK if failures == 0 else EXIT_CHECK_FAILED


def cmd_critic_judge(args: argparse.Namespace) -> int:
    if args.backend == "remote":
        if not args.url:
            raise ConfigError(["--url is required for the remote backend"])
        backend = RemoteBackend(url=args.url, backend_id=args.backend_id)
    else:
        backend = OracleBackend()
    triples = []
    for line_no, row, message in read_jsonl(args.input):
        if row is None:
            print(f"{args.input}:{line_no}: {message}", file=sys.stderr)
            continue
        triples.append(triple_from_row(row))
    judged = judge_triples(triples, backend)
    rows = []
    failures = 0
    for item in judged:
        row = {
            "question_id": item.triple.question_id,
            "sample_index": item.triple.sample_index,
        }
        if item.judgment is None:
            failures += 1
            row["error"] = item.error
        else:
            row.update(item.judgment.to_row())
        rows.append(row)
    write_jsonl_atomic(args.output, rows)
    print(f"judged {len(rows) - failures}/{len(rows)} triples ({failures} failures)")
    return EXIT_OK


def _forge_config(path: str) -> tuple[FilterConfig, MatchConfig, dict]:
    if not path:
        return FilterConfig(), MatchConfig(), {}
    from .orchestrator import load_config_file

    data = load_config_file(path)
    generator = data.get("generator", {})
    if generator.get("kind") == "file" and generator.get("path"):
        raw = Path(generator["path"])
        if not raw.is_absolute():
            generator["path"] = str(Path(path).resolve().parent / raw)
    filt = data.get("filter", {})
    match = data.get("match", {})
    filters = FilterConfig(
        lambda1=float(filt.get("lambda1", 0.8)),
        lambda2=int(filt.get("lambda2", 3)),
        keep_limit=int(filt.get("keep_limit", 4)),
        samples_per_question=int(filt.get("samples_per_question", 5)),
        seed_max_iters=int(filt.get("seed_max_iters", 3)),
    )
    match_config = MatchConfig(
        abs_tol=float(match.get("abs_tol", 1e-6)),
        rel_tol=float(match.get("rel_tol", 1e-6)),
    )
    return filters, match_config, data


def _load_judged_sets(path: str, require_judgments: bool) -> list[CandidateSet]:
    """Group judged-triple rows into per-question candidate sets."""
    sets: dict[str, CandidateSet] = {}
    order: list[str] = []
    for line_no, row, message in read_jsonl(path):
        if row is None:
            raise CorpusError(f"{path}:{line_no}: {message}")
        qid = str(row["question_id"])
        if qid not in sets:
            record = QuestionRecord(
                id=qid,
                question=str(row["question"]),
                reference_answer=str(row.get("reference_answer", "")) or "-",
                route="",
            )
            sets[qid] = CandidateSet(record=record)
            order.append(qid)
        judgment = None
        if "label" in row:
            judgment = CriticJudgment(
                label=str(row["label"]),
                p_label=float(row["p_label"]),
                parse_warning=bool(row.get("parse_warning", False)),
            )
        elif require_judgments:
            raise CorpusError(f"{path}:{line_no}: row lacks a critic label")
        sample = CodeSample(
            question_id=qid,
            sample_index=int(row["sample_index"]),
            program_text=str(row["program_text"]),
        )
        outcome = ExecutionOutcome.from_row(row["outcome"])
        sets[qid].entries.append(CandidateEntry(sample, outcome, judgment))
    return [sets[qid] for qid in order]


def cmd_forge(args: argparse.Namespace) -> int:
    filters, match_config, raw = _forge_config(args.config)
    kind = args.dataset_kind
    if kind == "seed":
        result = load_corpus(args.input)
        generator_spec = raw.get("generator", {})
        if generator_spec.get("kind") == "file":
            generator = FileGenerator(path=str(generator_spec["path"]))
        else:
            generator = EchoGenerator()
        exec_spec = raw.get("exec", {})
        limits = ExecLimits(
            wall_time_ms=int(exec_spec.get("wall_time_ms", 10_000)),
            max_output_bytes=int(exec_spec.get("max_output_bytes", 65_536)),
            worker_count=int(exec_spec.get("workers", 8)),
        )

        def execute(samples):
            tasks = [
                ExecTask(s.question_id, s.sample_index, s.program_text) for s in samples
            ]
            return execute_batch(tasks, limits)

        records = build_seed(
            result.records, generator, execute, filters, match_config,
            base_seed=int(raw.get("run", {}).get("seed", 0)),
        )
    else:
        require_judgments = kind in ("sft", "sft-hard", "dpo")
        sets = _load_judged_sets(args.input, require_judgments)
        if kind == "sft":
            records = build_sft(sets)
        elif kind == "sft-hard":
            records = build_sft_hard(sets, filters)
        else:
            records = build_dpo_pairs(sets)
    write_jsonl_atomic(args.output, (r.to_row() for r in records))
    print(f"wrote {len(records)} records to {args.output}")
    return EXIT_OK


def cmd_loss_check(args: argparse.Namespace) -> int:
    deviation = gradient_check(args.kind, trials=args.trials, seed=args.seed)
    tolerance = 1e-5
    print(
        f"{args.kind}: max relative gradient deviation over {args.trials} trials = {deviation:.3e}"
    )
    if deviation >= tolerance:
        print(f"exceeds tolerance {tolerance:.0e}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_eval_compare(args: argparse.Namespace) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.is_dir():
        raise ConfigError([f"runs directory not found: {runs_dir}"])
    runs = []
    for path in sorted(runs_dir.glob("*.jsonl")):
        em_scores: list[int] = []
        critic_scores: list[int] = []
        words: list[int] = []
        for line_no, row, message in read_jsonl(path):
            if row is None:
                raise CorpusError(f"{path}:{line_no}: {message}")
            em_scores.append(int(row["em"]))
            critic_scores.append(int(row["critic"]))
            words.append(int(row.get("words", 0)))
        if em_scores:
            runs.append(ScoredRun(path.stem, em_scores, critic_scores, words))
    if not runs:
        raise ConfigError([f"no scored runs found under {runs_dir}"])
    report = compare_scorers(runs)
    Path(args.output).write_text(
        json.dumps(report.to_dict(), ensure_ascii=False, indent=2, sort_keys=True),
        encoding="utf-8",
    )
    print(format_report_table(report))
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = validate_config(args.config)
    result = run_iteration(config, resume=args.resume, stop_after=args.stop_after)
    counts = json.dumps(result.manifest.counts, sort_keys=True)
    print(f"run complete through stage {result.completed_stage}: {counts}")
    print(f"run directory: {result.run_dir}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config = validate_config(args.config)
    print(json.dumps(config.raw, ensure_ascii=False, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
