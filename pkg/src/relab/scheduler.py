"""Job orchestration: manifest in, deterministic evaluation report out.

Planning turns a validated manifest into a DAG of work units, one per
(course, session, stage) with per-fold units for cross-validation:

* holdout over sessions s1..sn in start-date order: one extract unit per
  session, one train unit over s1..s(n-1), one test unit on sn.
* cross-validation with k folds inside one session: the session's
  extract unit plus k (train, test) pairs sharing it.
* both schemes: the union of the two plans, sharing extract units and
  one per-course evaluate unit. The CV session is the most recent one
  the holdout arm trains on (second-to-latest); a pure CV job over a
  multi-session course uses the latest session.

Every unit gets a cache key at planning time, chained Merkle-style:
extract keys hash the registered data-file digests, downstream keys hash
their dependencies' keys, and all of them include the manifest digest,
the unit's parameter document, and the job seed. Identical configuration
therefore reuses cached outputs no matter which job produced them, and
the cache store is the only channel through which units exchange data.

Execution runs a single coordinator and a bounded worker pool. Ready
units dispatch in lexicographic (course_id, session_id, stage) order;
cached units are marked without executing; a failure skips exactly the
failed unit's transitive dependents, so one course's failure never
touches another course. Job state changes append to a JSONL event log
that fully reconstructs the job after a restart.
"""

from __future__ import annotations

import json
import shutil
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

from .evalstats import EvalReport, EvalRow, build_eval_report
from .executor import (
    STATUS_SUCCEEDED,
    ExecutorBackend,
    SandboxSpec,
    StageResult,
    collect_outputs,
    run_stage,
)
from .hashing import canonical_json_bytes, sha256_bytes, sha256_concat
from .manifest import JobManifest, canonicalize, parse_manifest, render_manifest
from .manifest import validate_manifest
from .provenance import CacheStore, cache_key
from .refpipe import Hyperparams
from .registry import AccessPolicy, Registry

PHASES = (
    "queued",
    "planning",
    "running",
    "succeeded",
    "failed",
    "partial",
    "cancelled",
)
TERMINAL_PHASES = ("succeeded", "failed", "partial", "cancelled")

UNIT_PENDING = "pending"
UNIT_RUNNING = "running"
UNIT_DONE = "done"
UNIT_FAILED = "failed"
UNIT_SKIPPED = "skipped"
UNIT_CACHED = "cached"

_SETTLED = (UNIT_DONE, UNIT_CACHED)


class SchedulerError(Exception):
    """Raised for invalid submissions, unknown jobs, and bad transitions."""


@dataclass(frozen=True)
class WorkUnit:
    unit_id: str
    stage: str
    course_id: str
    session_id: str  # empty for aggregate stages (train-over-pool, evaluate)
    depends_on: Tuple[str, ...]
    cache_key: str
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "depends_on", tuple(self.depends_on))
        object.__setattr__(self, "params", dict(self.params))

    def sort_key(self):
        return (self.course_id, self.session_id, self.stage, self.unit_id)

    def to_json_obj(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "stage": self.stage,
            "course_id": self.course_id,
            "session_id": self.session_id,
            "depends_on": list(self.depends_on),
            "cache_key": self.cache_key,
            "params": self.params,
        }

    @staticmethod
    def from_json_obj(obj: dict) -> "WorkUnit":
        return WorkUnit(
            unit_id=obj["unit_id"],
            stage=obj["stage"],
            course_id=obj["course_id"],
            session_id=obj["session_id"],
            depends_on=tuple(obj["depends_on"]),
            cache_key=obj["cache_key"],
            params=obj["params"],
        )


@dataclass(frozen=True)
class JobState:
    job_id: str
    phase: str
    unit_states: Mapping[str, str]

    def counts(self) -> Dict[str, int]:
        out = {s: 0 for s in (UNIT_PENDING, UNIT_RUNNING, UNIT_DONE,
                              UNIT_FAILED, UNIT_SKIPPED, UNIT_CACHED)}
        for state in self.unit_states.values():
            out[state] += 1
        return out

    def to_json_obj(self) -> dict:
        """One rendering shared by every frontend surface."""
        return {
            "job_id": self.job_id,
            "phase": self.phase,
            "unit_states": dict(sorted(self.unit_states.items())),
            "counts": self.counts(),
        }


@dataclass(frozen=True)
class UnitReport:
    unit_id: str
    stage: str
    course_id: str
    session_id: str
    state: str
    cache_key: str
    stage_status: str = ""  # executor status for executed units
    output_digests: Mapping[str, str] = field(default_factory=dict)
    duration: float = 0.0
    detail: str = ""

    def to_json_obj(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "stage": self.stage,
            "course_id": self.course_id,
            "session_id": self.session_id,
            "state": self.state,
            "cache_key": self.cache_key,
            "stage_status": self.stage_status,
            "output_digests": dict(sorted(self.output_digests.items())),
            "duration": self.duration,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class JobReport:
    job_id: str
    phase: str
    manifest_digest: str
    entries: Tuple[UnitReport, ...]
    data_digests: Tuple[str, ...]
    eval_artifacts: Mapping[str, str]  # course_id -> metrics digest
    cache_hits: int
    wall_clock: float

    def to_json_obj(self) -> dict:
        return {
            "job_id": self.job_id,
            "phase": self.phase,
            "manifest_digest": self.manifest_digest,
            "entries": [e.to_json_obj() for e in self.entries],
            "data_digests": list(self.data_digests),
            "eval_artifacts": dict(sorted(self.eval_artifacts.items())),
            "cache_hits": self.cache_hits,
            "wall_clock": self.wall_clock,
        }

    def determinism_digest(self) -> str:
        """Digest of everything that must not vary across reruns.

        Timings, cache hit counts, and the job id are bookkeeping; unit
        outcomes, artifact digests, and inputs are content.
        """
        entries = [
            {
                "unit_id": e.unit_id,
                "state": "done" if e.state == UNIT_CACHED else e.state,
                "output_digests": dict(sorted(e.output_digests.items())),
            }
            for e in self.entries
        ]
        payload = {
            "manifest_digest": self.manifest_digest,
            "data_digests": list(self.data_digests),
            "entries": entries,
            "eval_artifacts": dict(sorted(self.eval_artifacts.items())),
        }
        return sha256_bytes(canonical_json_bytes(payload))


# ---------------------------------------------------------------------------
# planning


def _params_digest(params: Mapping[str, object]) -> str:
    return sha256_bytes(canonical_json_bytes(dict(params)))


def plan_units(
    manifest: JobManifest, registry: Registry
) -> Tuple[Tuple[WorkUnit, ...], Tuple[str, ...]]:
    """Expand a manifest into work units plus the data digests they read."""
    pairs = registry.resolve_selector(manifest.dataset_selector)
    if not pairs:
        raise SchedulerError("selector matches no sessions")
    by_course: Dict[str, List[str]] = {}
    for course_id, session_id in pairs:
        by_course.setdefault(course_id, []).append(session_id)

    manifest_digest = sha256_bytes(canonicalize(manifest))
    seed = manifest.seed
    hyper = Hyperparams().to_json_obj()
    units: List[WorkUnit] = []
    data_digests = set()

    for course_id in sorted(by_course):
        course = registry.load_course(course_id)
        sessions = [s for s in course.sessions if s.session_id in by_course[course_id]]
        # course.sessions are stored in start-date order already
        use_holdout = manifest.eval_config.uses_holdout
        use_cv = manifest.eval_config.uses_cv
        if use_holdout and len(sessions) < 2:
            raise SchedulerError(
                f"holdout requires >= 2 sessions for course {course_id!r}"
            )
        if use_holdout and use_cv:
            cv_session = sessions[-2]
        elif use_cv:
            cv_session = sessions[-1]
        else:
            cv_session = None

        extract_sessions = list(sessions) if use_holdout else [cv_session]
        extract_units: Dict[str, WorkUnit] = {}
        extract_params = {"feature_weeks": manifest.feature_weeks}
        for session in extract_sessions:
            file_digests = sorted(f.digest for f in session.data_files)
            data_digests.update(file_digests)
            unit = WorkUnit(
                unit_id=f"{course_id}:{session.session_id}:extract",
                stage="extract",
                course_id=course_id,
                session_id=session.session_id,
                depends_on=(),
                cache_key=cache_key(
                    "extract",
                    manifest_digest,
                    file_digests + [_params_digest(extract_params)],
                    seed,
                ),
                params=extract_params,
            )
            extract_units[session.session_id] = unit
            units.append(unit)

        test_units: List[WorkUnit] = []
        if use_holdout:
            train_sessions = sessions[:-1]
            test_session = sessions[-1]
            train_params = {"hyperparams": hyper}
            train_deps = [extract_units[s.session_id] for s in train_sessions]
            train = WorkUnit(
                unit_id=f"{course_id}:holdout:train",
                stage="train",
                course_id=course_id,
                session_id="",
                depends_on=tuple(u.unit_id for u in train_deps),
                cache_key=cache_key(
                    "train",
                    manifest_digest,
                    [u.cache_key for u in train_deps]
                    + [_params_digest(train_params)],
                    seed,
                ),
                params=train_params,
            )
            units.append(train)
            test_extract = extract_units[test_session.session_id]
            test = WorkUnit(
                unit_id=f"{course_id}:holdout:test",
                stage="test",
                course_id=course_id,
                session_id=test_session.session_id,
                depends_on=(train.unit_id, test_extract.unit_id),
                cache_key=cache_key(
                    "test",
                    manifest_digest,
                    [train.cache_key, test_extract.cache_key, _params_digest({})],
                    seed,
                ),
                params={},
            )
            units.append(test)
            test_units.append(test)

        if use_cv:
            k = manifest.eval_config.k
            cv_extract = extract_units[cv_session.session_id]
            for fold in range(1, k + 1):
                fold_params = {
                    "fold_count": k,
                    "fold_index": fold,
                    "fold_seed": seed,
                }
                train_params = dict(fold_params, hyperparams=hyper)
                prefix = f"{course_id}:{cv_session.session_id}:cv:fold{fold:02d}"
                train = WorkUnit(
                    unit_id=f"{prefix}:train",
                    stage="train",
                    course_id=course_id,
                    session_id=cv_session.session_id,
                    depends_on=(cv_extract.unit_id,),
                    cache_key=cache_key(
                        "train",
                        manifest_digest,
                        [cv_extract.cache_key, _params_digest(train_params)],
                        seed,
                    ),
                    params=train_params,
                )
                test = WorkUnit(
                    unit_id=f"{prefix}:test",
                    stage="test",
                    course_id=course_id,
                    session_id=cv_session.session_id,
                    depends_on=(train.unit_id, cv_extract.unit_id),
                    cache_key=cache_key(
                        "test",
                        manifest_digest,
                        [
                            train.cache_key,
                            cv_extract.cache_key,
                            _params_digest(fold_params),
                        ],
                        seed,
                    ),
                    params=fold_params,
                )
                units.extend((train, test))
                test_units.append(test)

        schemes = []
        if use_holdout:
            schemes.append("holdout")
        if use_cv:
            schemes.append("cross_validation")
        eval_params = {
            "week": manifest.feature_weeks,
            "schemes": schemes,
            "course_id": course_id,
            "cv_pooling": manifest.eval_config.cv_pooling,
        }
        ordered_tests = sorted(test_units, key=lambda u: u.unit_id)
        units.append(
            WorkUnit(
                unit_id=f"{course_id}:evaluate",
                stage="evaluate",
                course_id=course_id,
                session_id="",
                depends_on=tuple(u.unit_id for u in ordered_tests),
                cache_key=cache_key(
                    "evaluate",
                    manifest_digest,
                    [u.cache_key for u in ordered_tests]
                    + [_params_digest(eval_params)],
                    seed,
                ),
                params=eval_params,
            )
        )

    return tuple(units), tuple(sorted(data_digests))


# ---------------------------------------------------------------------------
# scheduler


class _Job:
    def __init__(self, job_id: str, job_dir: Path):
        self.job_id = job_id
        self.dir = job_dir
        self.lock = threading.Lock()
        self.phase = "queued"
        self.manifest: Optional[JobManifest] = None
        self.units: Tuple[WorkUnit, ...] = ()
        self.data_digests: Tuple[str, ...] = ()
        self.unit_states: Dict[str, str] = {}
        self.results: Dict[str, StageResult] = {}
        self.cancel_requested = False

    @property
    def events_path(self) -> Path:
        return self.dir / "events.jsonl"

    def append_event(self, event: dict) -> None:
        event = dict(event, ts=time.time())
        with open(self.events_path, "a") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")

    def set_phase(self, phase: str) -> None:
        self.phase = phase
        self.append_event({"event": "phase", "phase": phase})

    def set_unit_state(self, unit_id: str, state: str) -> None:
        self.unit_states[unit_id] = state
        self.append_event({"event": "unit", "unit_id": unit_id, "state": state})


class Scheduler:
    """Single-host coordinator over a worker pool, file-backed throughout."""

    def __init__(
        self,
        root: Path,
        registry: Registry,
        cache: Optional[CacheStore] = None,
        backend: Optional[ExecutorBackend] = None,
        policy: Optional[AccessPolicy] = None,
    ):
        self.root = Path(root)
        self.jobs_dir = self.root / "jobs"
        self.jobs_dir.mkdir(parents=True, exist_ok=True)
        self.registry = registry
        self.cache = cache if cache is not None else CacheStore(self.root / "cache")
        self.backend = backend if backend is not None else ExecutorBackend()
        self.policy = policy if policy is not None else AccessPolicy()
        self._jobs: Dict[str, _Job] = {}
        self._lock = threading.Lock()

    # -- job bookkeeping ----------------------------------------------------

    def _new_job_id(self) -> str:
        existing = [
            int(p.name.split("-")[1])
            for p in self.jobs_dir.iterdir()
            if p.is_dir() and p.name.startswith("job-")
        ]
        return f"job-{(max(existing) + 1 if existing else 1):06d}"

    def _job(self, job_id: str) -> _Job:
        with self._lock:
            if job_id in self._jobs:
                return self._jobs[job_id]
        job_dir = self.jobs_dir / job_id
        if not job_dir.is_dir():
            raise SchedulerError(f"unknown job {job_id!r}")
        job = self._replay(job_id, job_dir)
        with self._lock:
            return self._jobs.setdefault(job_id, job)

    def _replay(self, job_id: str, job_dir: Path) -> _Job:
        """Rebuild in-memory state from the event log after a restart."""
        job = _Job(job_id, job_dir)
        manifest_path = job_dir / "manifest.json"
        if manifest_path.is_file():
            job.manifest = parse_manifest(manifest_path.read_text())
        units_path = job_dir / "units.json"
        if units_path.is_file():
            obj = json.loads(units_path.read_text())
            job.units = tuple(WorkUnit.from_json_obj(u) for u in obj["units"])
            job.data_digests = tuple(obj["data_digests"])
        if job.events_path.is_file():
            with open(job.events_path) as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    event = json.loads(line)
                    if event["event"] == "phase":
                        job.phase = event["phase"]
                    elif event["event"] == "unit":
                        job.unit_states[event["unit_id"]] = event["state"]
        return job

    # -- operations -----------------------------------------------------------

    def submit(self, manifest: JobManifest) -> str:
        """Persist a validated manifest as a new queued job."""
        report = validate_manifest(manifest, self.registry)
        if not report.ok:
            raise SchedulerError(
                "manifest validation failed: " + "; ".join(report.violations)
            )
        with self._lock:
            job_id = self._new_job_id()
            job_dir = self.jobs_dir / job_id
            job_dir.mkdir()
            job = _Job(job_id, job_dir)
            self._jobs[job_id] = job
        (job_dir / "manifest.json").write_text(render_manifest(manifest))
        job.manifest = manifest
        job.append_event(
            {
                "event": "submitted",
                "job_id": job_id,
                "manifest_digest": sha256_bytes(canonicalize(manifest)),
            }
        )
        job.set_phase("queued")
        return job_id

    def plan(self, job_id: str) -> Tuple[WorkUnit, ...]:
        job = self._job(job_id)
        with job.lock:
            if job.phase != "queued":
                raise SchedulerError(
                    f"plan requires a queued job, {job_id} is {job.phase}"
                )
            job.set_phase("planning")
        try:
            units, data_digests = plan_units(job.manifest, self.registry)
        except Exception:
            with job.lock:
                job.set_phase("failed")
            raise
        with job.lock:
            job.units = units
            job.data_digests = data_digests
            (job.dir / "units.json").write_bytes(
                canonical_json_bytes(
                    {
                        "units": [u.to_json_obj() for u in units],
                        "data_digests": list(data_digests),
                    }
                )
            )
            for unit in units:
                job.set_unit_state(unit.unit_id, UNIT_PENDING)
            job.append_event({"event": "planned", "units": len(units)})
        return units

    def status(self, job_id: str) -> JobState:
        job = self._job(job_id)
        with job.lock:
            return JobState(
                job_id=job_id, phase=job.phase, unit_states=dict(job.unit_states)
            )

    def cancel(self, job_id: str) -> None:
        job = self._job(job_id)
        with job.lock:
            if job.phase in TERMINAL_PHASES:
                raise SchedulerError(f"job {job_id} already terminal: {job.phase}")
            job.cancel_requested = True
            if job.phase in ("queued", "planning"):
                for unit_id, state in sorted(job.unit_states.items()):
                    if state == UNIT_PENDING:
                        job.set_unit_state(unit_id, UNIT_SKIPPED)
                job.set_phase("cancelled")

    # -- execution ------------------------------------------------------------

    def execute(self, job_id: str, parallelism: int = 1) -> JobReport:
        if parallelism < 1:
            raise SchedulerError("parallelism must be a positive integer")
        job = self._job(job_id)
        with job.lock:
            if job.phase != "planning" or not job.units:
                raise SchedulerError(
                    f"execute requires a planned job, {job_id} is {job.phase}"
                )
            job.set_phase("running")
        started = time.monotonic()
        units_by_id = {u.unit_id: u for u in job.units}
        dependents: Dict[str, List[str]] = {u.unit_id: [] for u in job.units}
        for unit in job.units:
            for dep in unit.depends_on:
                dependents[dep].append(unit.unit_id)
        cache_hits = 0

        def ready() -> List[WorkUnit]:
            out = [
                units_by_id[uid]
                for uid, state in job.unit_states.items()
                if state == UNIT_PENDING
                and all(
                    job.unit_states[d] in _SETTLED
                    for d in units_by_id[uid].depends_on
                )
            ]
            return sorted(out, key=WorkUnit.sort_key)

        def skip_dependents(unit_id: str) -> None:
            stack = list(dependents[unit_id])
            while stack:
                uid = stack.pop()
                if job.unit_states[uid] == UNIT_PENDING:
                    job.set_unit_state(uid, UNIT_SKIPPED)
                    stack.extend(dependents[uid])

        futures = {}
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            while True:
                with job.lock:
                    cancelled = job.cancel_requested
                    if not cancelled:
                        progressed = True
                        while progressed:
                            progressed = False
                            for unit in ready():
                                entry = self.cache.get(unit.cache_key)
                                if entry is not None:
                                    self.cache.materialize(
                                        entry, self._results_dir(job, unit)
                                    )
                                    job.set_unit_state(unit.unit_id, UNIT_CACHED)
                                    cache_hits += 1
                                    progressed = True
                                elif len(futures) < parallelism:
                                    job.set_unit_state(unit.unit_id, UNIT_RUNNING)
                                    fut = pool.submit(self._run_unit, job, unit)
                                    futures[fut] = unit
                    if cancelled or not futures:
                        break
                done, _ = wait(futures, return_when=FIRST_COMPLETED)
                for fut in done:
                    unit = futures.pop(fut)
                    result = fut.result()
                    with job.lock:
                        job.results[unit.unit_id] = result
                        if result.status == STATUS_SUCCEEDED:
                            job.set_unit_state(unit.unit_id, UNIT_DONE)
                        else:
                            job.set_unit_state(unit.unit_id, UNIT_FAILED)
                            skip_dependents(unit.unit_id)

            # drain whatever was in flight when a cancel arrived
            if futures:
                wait(list(futures))
                for fut, unit in futures.items():
                    result = fut.result()
                    with job.lock:
                        job.results[unit.unit_id] = result
                        job.set_unit_state(
                            unit.unit_id,
                            UNIT_DONE
                            if result.status == STATUS_SUCCEEDED
                            else UNIT_FAILED,
                        )

        with job.lock:
            if job.cancel_requested:
                for unit_id, state in sorted(job.unit_states.items()):
                    if state == UNIT_PENDING:
                        job.set_unit_state(unit_id, UNIT_SKIPPED)
                job.set_phase("cancelled")
            else:
                states = set(job.unit_states.values())
                settled = sum(
                    1 for s in job.unit_states.values() if s in _SETTLED
                )
                if states <= set(_SETTLED):
                    job.set_phase("succeeded")
                elif settled:
                    job.set_phase("partial")
                else:
                    job.set_phase("failed")
        report = self._assemble_report(
            job, cache_hits, time.monotonic() - started
        )
        (job.dir / "report.json").write_bytes(
            canonical_json_bytes(report.to_json_obj())
        )
        return report

    # -- unit execution ---------------------------------------------------------

    def _results_dir(self, job: _Job, unit: WorkUnit) -> Path:
        return job.dir / "results" / unit.unit_id

    def _run_unit(self, job: _Job, unit: WorkUnit) -> StageResult:
        """Worker body: stage inputs, run the sandboxed stage, export."""
        work = job.dir / "work" / unit.unit_id
        if work.exists():
            shutil.rmtree(work)
        data = work / "data"
        scratch = work / "scratch"
        out = work / "out"
        for d in (data, scratch, out):
            d.mkdir(parents=True)
        try:
            self._stage_inputs(job, unit, data)
        except Exception as exc:
            return StageResult(
                status="failed",
                exit_code=-1,
                duration=0.0,
                log_digest="",
                detail=f"input staging failed: {exc}",
            )
        sandbox = SandboxSpec(
            data_mount=data,
            scratch_dir=scratch,
            output_dir=out,
            env={
                "STAGE": unit.stage,
                "COURSE_ID": unit.course_id,
                "SESSION_ID": unit.session_id,
                "SEED": str(job.manifest.seed),
            },
            image_ref=job.manifest.image_ref,
        )
        result = run_stage(job.manifest.stage(unit.stage), sandbox, self.backend)
        if result.status == STATUS_SUCCEEDED:
            collect_outputs(result, self.policy, out, self._results_dir(job, unit))
            self.cache.put(unit.cache_key, result.output_digests, out)
        return result

    def _stage_inputs(self, job: _Job, unit: WorkUnit, data: Path) -> None:
        """Build the unit's read-only data tree from registry and cache."""
        units_by_id = {u.unit_id: u for u in job.units}
        deps = [units_by_id[d] for d in unit.depends_on]
        if unit.stage == "extract":
            course = self.registry.load_course(unit.course_id)
            session = course.session(unit.session_id)
            src = self.registry.session_dir(unit.course_id, unit.session_id)
            for f in session.data_files:
                target = data / f.path
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes((src / f.path).read_bytes())
        elif unit.stage == "train":
            for dep in deps:
                self._materialize_dep(dep, data / "sessions" / dep.session_id)
        elif unit.stage == "test":
            for dep in deps:
                if dep.stage == "train":
                    self._materialize_dep(dep, data / "model")
                else:
                    self._materialize_dep(dep, data / "sessions" / dep.session_id)
        elif unit.stage == "evaluate":
            for dep in deps:
                if ":holdout:" in dep.unit_id:
                    self._materialize_dep(dep, data / "preds" / "holdout")
                else:
                    fold = int(dep.params["fold_index"])
                    self._materialize_dep(
                        dep, data / "preds" / f"cv_fold_{fold:02d}"
                    )
        else:
            raise SchedulerError(f"unknown stage {unit.stage!r}")
        (data / "params.json").write_bytes(
            canonical_json_bytes(dict(unit.params))
        )

    def _materialize_dep(self, dep: WorkUnit, dest: Path) -> None:
        entry = self.cache.get(dep.cache_key)
        if entry is None:
            raise SchedulerError(
                f"outputs of {dep.unit_id} missing from cache"
            )
        self.cache.materialize(entry, dest)

    # -- reporting ---------------------------------------------------------------

    def _assemble_report(
        self, job: _Job, cache_hits: int, wall_clock: float
    ) -> JobReport:
        entries = []
        eval_artifacts = {}
        with job.lock:
            manifest_digest = sha256_bytes(canonicalize(job.manifest))
            for unit in sorted(job.units, key=WorkUnit.sort_key):
                state = job.unit_states[unit.unit_id]
                result = job.results.get(unit.unit_id)
                if state == UNIT_CACHED:
                    cached = self.cache.get(unit.cache_key)
                    digests = dict(cached.output_digests)
                    entry = UnitReport(
                        unit_id=unit.unit_id,
                        stage=unit.stage,
                        course_id=unit.course_id,
                        session_id=unit.session_id,
                        state=state,
                        cache_key=unit.cache_key,
                        stage_status="cached",
                        output_digests=digests,
                    )
                elif result is not None:
                    entry = UnitReport(
                        unit_id=unit.unit_id,
                        stage=unit.stage,
                        course_id=unit.course_id,
                        session_id=unit.session_id,
                        state=state,
                        cache_key=unit.cache_key,
                        stage_status=result.status,
                        output_digests=dict(result.output_digests),
                        duration=result.duration,
                        detail=result.detail,
                    )
                else:
                    entry = UnitReport(
                        unit_id=unit.unit_id,
                        stage=unit.stage,
                        course_id=unit.course_id,
                        session_id=unit.session_id,
                        state=state,
                        cache_key=unit.cache_key,
                    )
                entries.append(entry)
                if unit.stage == "evaluate" and state in _SETTLED:
                    digest = entry.output_digests.get("metrics.json", "")
                    if digest:
                        eval_artifacts[unit.course_id] = digest
            return JobReport(
                job_id=job.job_id,
                phase=job.phase,
                manifest_digest=manifest_digest,
                entries=tuple(entries),
                data_digests=job.data_digests,
                eval_artifacts=eval_artifacts,
                cache_hits=cache_hits,
                wall_clock=wall_clock,
            )

    def load_report(self, job_id: str) -> Optional[dict]:
        path = self.jobs_dir / job_id / "report.json"
        if not path.is_file():
            return None
        return json.loads(path.read_text())

    def eval_report(self, job_id: str) -> EvalReport:
        """Pool every course's metrics artifact into one evaluation table."""
        job = self._job(job_id)
        if job.phase not in TERMINAL_PHASES:
            raise SchedulerError(f"job {job_id} has not finished: {job.phase}")
        rows = []
        for unit in job.units:
            if unit.stage != "evaluate":
                continue
            if job.unit_states.get(unit.unit_id) not in _SETTLED:
                continue
            metrics_path = self._results_dir(job, unit) / "metrics.json"
            obj = json.loads(metrics_path.read_text())
            for row in obj["rows"]:
                rows.append(
                    EvalRow(
                        course_id=obj["course_id"],
                        week=int(obj["week"]),
                        scheme=row["scheme"],
                        auc=float(row["auc"]),
                    )
                )
        ci = job.manifest.eval_config.ci_level if job.manifest else 0.95
        return build_eval_report(rows, ci_level=ci, metadata={"job_id": job_id})
