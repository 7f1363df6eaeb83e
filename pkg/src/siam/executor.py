"""Sandboxed execution of candidate programs with a worker pool.

Every task runs in a fresh subprocess with its own scratch directory and an
environment cleared to a small allowlist; model-generated code is untrusted
input. The runner rewrites Python programs so the value of the final
expression (or a variable named ``solution``) is printed between solution
delimiters, making result capture explicit instead of guessing from stdout.

The batch API is externally synchronous and keyed: the outcome map depends
only on the tasks, the limits, and interpreter behavior, never on worker
count or scheduling order.
"""

from __future__ import annotations

import ast
import os
import shutil
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .corpus import (
    EXEC_NO_VALUE,
    EXEC_OK,
    EXEC_RUNTIME_ERROR,
    EXEC_TIMEOUT,
    ExecutionOutcome,
)

SOLUTION_OPEN = "<solution>"
SOLUTION_CLOSE = "</solution>"

TIMEOUT_GRACE_MS = 200
STDERR_EXCERPT_BYTES = 2048

_CAPTURE_NAME = "__captured_solution__"
_WORKDIR_PLACEHOLDER = "<workdir>"

_EPILOGUE = (
    "\nif {name} is not None:\n"
    '    print("{open}" + str({name}) + "{close}")\n'
)


class ExecutorConfigError(Exception):
    """Interpreter misconfiguration; fatal, distinct from per-task failures."""


@dataclass(frozen=True)
class ExecLimits:
    wall_time_ms: int = 10_000
    max_output_bytes: int = 65_536
    worker_count: int = 8

    def __post_init__(self) -> None:
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.wall_time_ms < 100:
            raise ValueError("wall_time_ms must be >= 100")
        if self.max_output_bytes < 1:
            raise ValueError("max_output_bytes must be >= 1")


@dataclass(frozen=True)
class ExecTask:
    question_id: str
    sample_index: int
    program_text: str
    limits: ExecLimits | None = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.question_id, self.sample_index)


@dataclass(frozen=True)
class InterpreterSpec:
    """Command template for running one program file.

    ``command`` must contain the ``{program}`` placeholder; any command that
    reads the program file, writes stdout/stderr, and exits works. The
    ``python_harness`` flag enables the final-expression capture rewrite,
    which only makes sense for Python programs.
    """

    command: tuple[str, ...] = (sys.executable, "-I", "{program}")
    python_harness: bool = True
    program_filename: str = "program.py"

    def argv(self, program_path: str) -> list[str]:
        if not any("{program}" in part for part in self.command):
            raise ExecutorConfigError("interpreter command lacks {program} placeholder")
        return [part.replace("{program}", program_path) for part in self.command]


DEFAULT_INTERPRETER = InterpreterSpec()

# Environment passed to child processes. HOME and TMPDIR point into the
# task's scratch directory at run time.
_BASE_CHILD_ENV = {
    "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
    "LANG": "C.UTF-8",
    "LC_ALL": "C.UTF-8",
    "PYTHONIOENCODING": "utf-8",
}


def prepare_program(program_text: str) -> str:
    """Attach the capture harness to a Python program.

    If the program ends with a bare expression, its value becomes the
    captured solution; otherwise a top-level variable named ``solution`` is
    captured when one is assigned. A ``None`` value is not printed, so
    programs that print their own answer still resolve through the last-line
    rule. Programs that fail to parse are returned unchanged.
    """
    try:
        tree = ast.parse(program_text)
    except SyntaxError:
        return program_text
    if not tree.body:
        return program_text
    lines = program_text.splitlines()
    last = tree.body[-1]
    shares_line = len(tree.body) > 1 and tree.body[-2].end_lineno == last.lineno
    if isinstance(last, ast.Expr) and not shares_line:
        segment = ast.get_source_segment(program_text, last)
        if segment is None:
            return program_text
        head = lines[: last.lineno - 1]
        tail = lines[last.end_lineno :]
        rewritten = head + [f"{_CAPTURE_NAME} = ({segment})"] + tail
        return "\n".join(rewritten) + _epilogue()
    if _assigns_solution(tree):
        capture = (
            "\ntry:\n"
            f"    {_CAPTURE_NAME} = solution\n"
            "except NameError:\n"
            f"    {_CAPTURE_NAME} = None\n"
        )
        return program_text + capture + _epilogue()
    return program_text


def _epilogue() -> str:
    return _EPILOGUE.format(name=_CAPTURE_NAME, open=SOLUTION_OPEN, close=SOLUTION_CLOSE)


def _assigns_solution(tree: ast.Module) -> bool:
    for node in tree.body:
        targets: list[ast.expr] = []
        if isinstance(node, ast.Assign):
            targets = list(node.targets)
        elif isinstance(node, (ast.AnnAssign, ast.AugAssign)):
            targets = [node.target]
        for target in targets:
            if isinstance(target, ast.Name) and target.id == "solution":
                return True
            if isinstance(target, (ast.Tuple, ast.List)):
                for elt in target.elts:
                    if isinstance(elt, ast.Name) and elt.id == "solution":
                        return True
    return False


def extract_solution(raw_stdout: str) -> str | None:
    """Pull the captured value out of program stdout.

    The text between the last pair of solution delimiters wins; without
    delimiters the last nonempty printed line is used; empty output means no
    value.
    """
    if not raw_stdout:
        return None
    start = raw_stdout.rfind(SOLUTION_OPEN)
    if start != -1:
        end = raw_stdout.find(SOLUTION_CLOSE, start)
        if end != -1:
            return raw_stdout[start + len(SOLUTION_OPEN) : end].strip()
    for line in reversed(raw_stdout.splitlines()):
        if line.strip():
            return line.strip()
    return None


def execute_one(
    task: ExecTask,
    limits: ExecLimits | None = None,
    interpreter: InterpreterSpec = DEFAULT_INTERPRETER,
) -> ExecutionOutcome:
    """Run one program under the configured limits.

    Statuses: ``ok`` with the captured value on a clean exit that produced
    one; ``no_value`` on a clean exit without one; ``runtime_error`` on a
    nonzero exit; ``timeout`` when the wall clock is exceeded and the process
    is killed (within a 200 ms grace margin).
    """
    effective = task.limits or limits or ExecLimits()
    _check_interpreter(interpreter)
    workdir = tempfile.mkdtemp(prefix="exec-task-")
    try:
        program_path = os.path.join(workdir, interpreter.program_filename)
        text = task.program_text
        if interpreter.python_harness:
            text = prepare_program(text)
        with open(program_path, "w", encoding="utf-8") as handle:
            handle.write(text)
        env = dict(_BASE_CHILD_ENV)
        env["HOME"] = workdir
        env["TMPDIR"] = workdir
        argv = interpreter.argv(program_path)
        wall_s = effective.wall_time_ms / 1000.0
        started = time.monotonic()
        try:
            proc = subprocess.Popen(
                argv,
                cwd=workdir,
                env=env,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                stdin=subprocess.DEVNULL,
            )
        except FileNotFoundError as exc:
            raise ExecutorConfigError(f"interpreter not runnable: {argv[0]}") from exc
        timed_out = False
        try:
            stdout_b, stderr_b = proc.communicate(timeout=wall_s)
        except subprocess.TimeoutExpired:
            timed_out = True
            proc.kill()
            stdout_b, stderr_b = proc.communicate()
        elapsed_ms = int((time.monotonic() - started) * 1000)
        stdout = _decode(stdout_b, effective.max_output_bytes)
        stderr = _decode(stderr_b, STDERR_EXCERPT_BYTES).replace(
            workdir, _WORKDIR_PLACEHOLDER
        )
        if timed_out:
            # Recorded time is the consumed budget, bounded by the declared
            # grace margin even if reaping the killed process lagged.
            capped = min(elapsed_ms, effective.wall_time_ms + TIMEOUT_GRACE_MS)
            return ExecutionOutcome(EXEC_TIMEOUT, None, stderr, capped)
        if proc.returncode != 0:
            if not stderr:
                stderr = f"exit code {proc.returncode}"
            return ExecutionOutcome(EXEC_RUNTIME_ERROR, None, stderr, elapsed_ms)
        value = extract_solution(stdout)
        if value is None:
            return ExecutionOutcome(EXEC_NO_VALUE, None, stderr, elapsed_ms)
        return ExecutionOutcome(EXEC_OK, value, stderr, elapsed_ms)
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


def execute_batch(
    tasks: Sequence[ExecTask],
    limits: ExecLimits | None = None,
    interpreter: InterpreterSpec = DEFAULT_INTERPRETER,
) -> dict[tuple[str, int], ExecutionOutcome]:
    """Run a batch on a fixed-size worker pool; one outcome per task key.

    Task keys must be unique. Per-task failures never abort the batch; the
    returned map is ordered by key regardless of completion order.
    """
    effective = limits or ExecLimits()
    keys = [task.key for task in tasks]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate (question_id, sample_index) task keys in batch")
    _check_interpreter(interpreter)
    if not tasks:
        return {}

    def run(task: ExecTask) -> tuple[tuple[str, int], ExecutionOutcome]:
        try:
            return task.key, execute_one(task, effective, interpreter)
        except ExecutorConfigError:
            raise
        except Exception as exc:  # harness bug or OS-level failure: isolate
            outcome = ExecutionOutcome(
                EXEC_RUNTIME_ERROR, None, f"harness failure: {exc}", 0
            )
            return task.key, outcome

    try:
        pool = ThreadPoolExecutor(max_workers=effective.worker_count)
    except Exception as exc:
        raise ExecutorConfigError(f"worker pool initialization failed: {exc}") from exc
    with pool:
        results = dict(pool.map(run, tasks))
    return {key: results[key] for key in sorted(results)}


def _check_interpreter(interpreter: InterpreterSpec) -> None:
    executable = interpreter.command[0]
    if os.path.sep in executable:
        if not os.access(executable, os.X_OK):
            raise ExecutorConfigError(f"interpreter not executable: {executable}")
    elif shutil.which(executable) is None:
        raise ExecutorConfigError(f"interpreter not found on PATH: {executable}")


def _decode(data: bytes, limit: int) -> str:
    return data[:limit].decode("utf-8", errors="replace")
