"""Sandboxed execution of a single pipeline stage.

Two backends share one contract:

* ``local_process`` spawns a child process with a scrubbed environment,
  working directory inside a stage-private scratch tree, and a read-only
  data mount. Overwrites of mount files are blocked by file permissions;
  creations and deletions inside the mount succeed at the filesystem
  level (directories stay traversable) but are caught by a before/after
  digest sweep and escalate the result to ``policy_violation``. File
  modes do not bind root, so under root every mount mutation lands in
  the sweep. Run the backend against a private copy of the data when
  the caller cannot tolerate even transient mutation; the engine's
  scheduler does exactly that.
* ``container_runtime`` shells out to any OCI-compatible runtime through
  an argument-vector template with ``{IMAGE}``, ``{DATA_MOUNT}`` and
  ``{OUTPUT_DIR}`` placeholders, each of which must appear exactly once.
  The template is trusted to enforce isolation (read-only mount flag,
  disabled network); the stage command is appended after the template.

Network denial under ``local_process`` is best-effort only (environment
scrubbing, no kernel sandboxing); treat it as honest-but-unenforced.

The stage sees seven environment variables: ``STAGE``, ``COURSE_ID``,
``SESSION_ID``, ``SEED`` (from the sandbox spec) plus ``DATA_DIR``,
``OUTPUT_DIR`` and ``SCRATCH_DIR`` (derived from the sandbox paths).
stdout and stderr are captured together, in full, to a log file whose
digest lands in the result.
"""

from __future__ import annotations

import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

from .hashing import sha256_file
from .manifest import StageSpec
from .registry import AccessPolicy, ExportDecision, check_export

STATUS_SUCCEEDED = "succeeded"
STATUS_FAILED = "failed"
STATUS_TIMEOUT = "timeout"
STATUS_POLICY_VIOLATION = "policy_violation"

BACKEND_LOCAL = "local_process"
BACKEND_CONTAINER = "container_runtime"

REQUIRED_ENV_KEYS = ("STAGE", "COURSE_ID", "SESSION_ID", "SEED")
TEMPLATE_PLACEHOLDERS = ("{IMAGE}", "{DATA_MOUNT}", "{OUTPUT_DIR}")

TIMEOUT_GRACE_SECONDS = 5.0
LOG_FILE_NAME = "_stage.log"

DEFAULT_MAX_OUTPUT_BYTES = 64 * 1024 * 1024


class ExecutorError(ValueError):
    """Invalid sandbox, backend, or stage configuration."""


def _is_subpath(a: Path, b: Path) -> bool:
    try:
        a.relative_to(b)
        return True
    except ValueError:
        return False


@dataclass(frozen=True)
class SandboxSpec:
    """Filesystem layout, environment, and limits for one stage run."""

    data_mount: Path
    scratch_dir: Path
    output_dir: Path
    env: Mapping[str, str]
    timeout: Optional[float] = None  # seconds; None defers to the stage spec
    max_output_bytes: int = DEFAULT_MAX_OUTPUT_BYTES
    image_ref: str = ""  # used by container_runtime templates

    def __post_init__(self):
        paths = {
            "data_mount": Path(self.data_mount),
            "scratch_dir": Path(self.scratch_dir),
            "output_dir": Path(self.output_dir),
        }
        for name, p in paths.items():
            if not p.is_absolute():
                raise ExecutorError(f"{name} must be an absolute path: {p}")
            object.__setattr__(self, name, p)
        keys = list(paths.values())
        for i, a in enumerate(keys):
            for b in keys[i + 1 :]:
                if _is_subpath(a, b) or _is_subpath(b, a):
                    raise ExecutorError(
                        f"sandbox paths must be pairwise disjoint: {a} vs {b}"
                    )
        missing = [k for k in REQUIRED_ENV_KEYS if k not in self.env]
        if missing:
            raise ExecutorError(f"sandbox env missing required keys: {missing}")
        if self.timeout is not None and self.timeout <= 0:
            raise ExecutorError("timeout must be positive when given")
        if self.max_output_bytes <= 0:
            raise ExecutorError("max_output_bytes must be positive")


@dataclass(frozen=True)
class ExecutorBackend:
    kind: str = BACKEND_LOCAL
    runtime_command_template: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (BACKEND_LOCAL, BACKEND_CONTAINER):
            raise ExecutorError(f"unknown backend kind: {self.kind!r}")
        object.__setattr__(
            self, "runtime_command_template", tuple(self.runtime_command_template)
        )
        if self.kind == BACKEND_CONTAINER:
            joined = "\x00".join(self.runtime_command_template)
            for ph in TEMPLATE_PLACEHOLDERS:
                if joined.count(ph) != 1:
                    raise ExecutorError(
                        f"container template must contain {ph} exactly once"
                    )
        elif self.runtime_command_template:
            raise ExecutorError("local_process backend takes no command template")


@dataclass(frozen=True)
class StageResult:
    status: str
    exit_code: int
    duration: float
    log_digest: str
    output_digests: Mapping[str, str] = field(default_factory=dict)
    log_path: Optional[Path] = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == STATUS_SUCCEEDED


def stage_environment(sandbox: SandboxSpec) -> Dict[str, str]:
    """The scrubbed environment a stage process receives.

    Nothing from the parent environment leaks through except PATH and
    PYTHONPATH (needed to locate interpreters and, in development runs,
    this package). HOME and TMPDIR point into the scratch tree.
    """
    env = {
        "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
        "HOME": str(sandbox.scratch_dir),
        "TMPDIR": str(sandbox.scratch_dir),
        "LANG": "C.UTF-8",
        "PYTHONHASHSEED": "0",
        "DATA_DIR": str(sandbox.data_mount),
        "OUTPUT_DIR": str(sandbox.output_dir),
        "SCRATCH_DIR": str(sandbox.scratch_dir),
    }
    if "PYTHONPATH" in os.environ:
        env["PYTHONPATH"] = os.environ["PYTHONPATH"]
    env.update({k: str(v) for k, v in sandbox.env.items()})
    return env


def build_command(
    stage: StageSpec, sandbox: SandboxSpec, backend: ExecutorBackend
) -> Tuple[str, ...]:
    """Final argument vector: template-substituted prefix + stage command."""
    if backend.kind == BACKEND_LOCAL:
        return tuple(stage.command)
    prefix = []
    for arg in backend.runtime_command_template:
        arg = arg.replace("{IMAGE}", sandbox.image_ref)
        arg = arg.replace("{DATA_MOUNT}", str(sandbox.data_mount))
        arg = arg.replace("{OUTPUT_DIR}", str(sandbox.output_dir))
        prefix.append(arg)
    return tuple(prefix) + tuple(stage.command)


def _mount_snapshot(mount: Path) -> Dict[str, str]:
    snap = {}
    for path in sorted(mount.rglob("*")):
        if path.is_file():
            snap[str(path.relative_to(mount))] = sha256_file(path)
    return snap


def _protect_mount_files(mount: Path) -> Dict[Path, int]:
    """chmod data files read-only; returns original modes for restore."""
    original = {}
    for path in sorted(mount.rglob("*")):
        if path.is_file():
            mode = path.stat().st_mode
            original[path] = mode
            path.chmod(0o444)
    return original


def _restore_modes(original: Dict[Path, int]) -> None:
    for path, mode in original.items():
        if path.exists():
            path.chmod(mode)


def run_stage(
    stage: StageSpec, sandbox: SandboxSpec, backend: ExecutorBackend
) -> StageResult:
    """Execute one stage to completion and classify the outcome.

    Status precedence: policy_violation (mount mutated) beats timeout
    beats nonzero-exit beats missing-output; only a clean run with all
    declared outputs present is ``succeeded``.
    """
    for name in ("data_mount", "scratch_dir", "output_dir"):
        p = getattr(sandbox, name)
        if not p.is_dir():
            raise ExecutorError(f"{name} does not exist: {p}")

    timeout = sandbox.timeout if sandbox.timeout is not None else stage.timeout
    log_path = sandbox.scratch_dir / LOG_FILE_NAME
    command = build_command(stage, sandbox, backend)
    env = stage_environment(sandbox)

    before = _mount_snapshot(sandbox.data_mount)
    original_modes = (
        _protect_mount_files(sandbox.data_mount)
        if backend.kind == BACKEND_LOCAL
        else {}
    )
    started = time.monotonic()
    timed_out = False
    try:
        with open(log_path, "wb") as log:
            proc = subprocess.Popen(
                command,
                cwd=sandbox.scratch_dir,
                env=env,
                stdout=log,
                stderr=subprocess.STDOUT,
            )
            try:
                proc.wait(timeout=timeout)
            except subprocess.TimeoutExpired:
                timed_out = True
                proc.terminate()
                try:
                    proc.wait(timeout=TIMEOUT_GRACE_SECONDS)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()
        exit_code = proc.returncode
    finally:
        _restore_modes(original_modes)
    duration = time.monotonic() - started

    after = _mount_snapshot(sandbox.data_mount)
    log_digest = sha256_file(log_path)

    def result(status, detail="", output_digests=None):
        return StageResult(
            status=status,
            exit_code=exit_code,
            duration=duration,
            log_digest=log_digest,
            output_digests=dict(output_digests or {}),
            log_path=log_path,
            detail=detail,
        )

    if after != before:
        created = sorted(set(after) - set(before))
        deleted = sorted(set(before) - set(after))
        changed = sorted(
            k for k in set(before) & set(after) if before[k] != after[k]
        )
        parts = []
        if created:
            parts.append(f"created {created}")
        if deleted:
            parts.append(f"deleted {deleted}")
        if changed:
            parts.append(f"modified {changed}")
        return result(
            STATUS_POLICY_VIOLATION,
            detail="data mount mutated: " + "; ".join(parts),
        )
    if timed_out:
        return result(STATUS_TIMEOUT, detail=f"exceeded {timeout}s wall clock")
    if exit_code != 0:
        return result(STATUS_FAILED, detail=f"exit code {exit_code}")

    digests = {}
    missing = []
    total_bytes = 0
    for rel in stage.outputs:
        path = sandbox.output_dir / rel
        if not path.is_file():
            missing.append(rel)
            continue
        digests[rel] = sha256_file(path)
        total_bytes += path.stat().st_size
    if missing:
        return result(
            STATUS_FAILED,
            detail=f"missing output: {missing}",
            output_digests=digests,
        )
    if total_bytes > sandbox.max_output_bytes:
        return result(
            STATUS_FAILED,
            detail=(
                f"declared outputs total {total_bytes} bytes, "
                f"limit {sandbox.max_output_bytes}"
            ),
            output_digests=digests,
        )
    return result(STATUS_SUCCEEDED, output_digests=digests)


def collect_outputs(
    result: StageResult,
    policy: AccessPolicy,
    output_dir: Path,
    dest_dir: Path,
) -> Tuple[Tuple[str, ...], Tuple[ExportDecision, ...]]:
    """Copy the allowlisted declared outputs of a successful stage.

    Returns (exported relative paths, full decision list). Denied paths
    are recorded with their reasons and never copied.
    """
    if result.status != STATUS_SUCCEEDED:
        raise ExecutorError("collect_outputs requires a succeeded result")
    output_dir = Path(output_dir)
    dest_dir = Path(dest_dir)
    sizes = {
        rel: (output_dir / rel).stat().st_size for rel in result.output_digests
    }
    decisions = check_export(sizes, policy)
    exported = []
    dest_dir.mkdir(parents=True, exist_ok=True)
    for decision in decisions:
        if not decision.allowed:
            continue
        src = output_dir / decision.path
        dst = dest_dir / decision.path
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(src.read_bytes())
        exported.append(decision.path)
    return tuple(exported), decisions
