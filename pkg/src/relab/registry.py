"""Course/session catalog and the execute-against access policy.

The registry owns metadata only: course descriptors, session start dates,
and content digests of the raw data files. Raw file contents never cross
this module's boundary; stages see data through read-only sandbox mounts
and may export only what the access policy allows.

On-disk layout under the registry root:
    data/<course_id>/<session_id>/...   immutable raw files
    index/<course_id>.json              registered course descriptor
"""

from __future__ import annotations

import datetime as dt
import json
import posixpath
import threading
from dataclasses import dataclass
from fnmatch import fnmatchcase
from pathlib import Path
from typing import List, Mapping, Optional, Tuple

from .hashing import canonical_json_bytes, sha256_file

DEFAULT_MAX_EXPORT_BYTES = 64 * 1024 * 1024
DEFAULT_EXPORT_ALLOWLIST = ("*.csv", "*.json")

SELECTOR_KINDS = ("single_session", "whole_course", "all_courses")


class RegistryError(Exception):
    """Raised for descriptor, lookup, and verification failures."""


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class DataFile:
    path: str  # relative to the session directory
    digest: str
    size: int


@dataclass(frozen=True)
class Session:
    session_id: str
    start_date: dt.date
    num_weeks: int
    data_files: Tuple[DataFile, ...]

    def __post_init__(self):
        if self.num_weeks < 2:
            raise RegistryError("num_weeks must be >= 2")


@dataclass(frozen=True)
class Course:
    course_id: str
    platform_schema: str
    sessions: Tuple[Session, ...]

    def __post_init__(self):
        ids = [s.session_id for s in self.sessions]
        if len(set(ids)) != len(ids):
            raise RegistryError(f"duplicate session ids in course {self.course_id!r}")
        dates = sorted(s.start_date for s in self.sessions)
        if any(a == b for a, b in zip(dates, dates[1:])):
            raise RegistryError(
                f"session start dates must be distinct in course {self.course_id!r}"
            )

    def session(self, session_id: str) -> Session:
        for s in self.sessions:
            if s.session_id == session_id:
                return s
        raise RegistryError(
            f"unknown session {session_id!r} in course {self.course_id!r}"
        )


@dataclass(frozen=True)
class AccessPolicy:
    """Execute-against policy: read-only data, no network, bounded exports.

    The mount mode and network flag are constants of the model, not knobs;
    constructing a policy that relaxes them is an error.
    """

    export_allowlist: Tuple[str, ...] = DEFAULT_EXPORT_ALLOWLIST
    max_export_bytes: int = DEFAULT_MAX_EXPORT_BYTES
    data_mount_mode: str = "read-only"
    network_allowed: bool = False

    def __post_init__(self):
        if self.data_mount_mode != "read-only":
            raise RegistryError("data mounts are always read-only")
        if self.network_allowed:
            raise RegistryError("stage network access is never allowed")
        if self.max_export_bytes <= 0:
            raise RegistryError("max_export_bytes must be positive")


@dataclass(frozen=True)
class DatasetSelector:
    kind: str
    course_id: Optional[str] = None
    session_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in SELECTOR_KINDS:
            raise RegistryError(f"unknown selector kind {self.kind!r}")
        if self.kind == "single_session" and not (self.course_id and self.session_id):
            raise RegistryError("single_session selector needs course_id and session_id")
        if self.kind == "whole_course" and not self.course_id:
            raise RegistryError("whole_course selector needs course_id")
        if self.kind == "all_courses" and (self.course_id or self.session_id):
            raise RegistryError("all_courses selector takes no ids")

    def to_json_obj(self) -> dict:
        return {
            "kind": self.kind,
            "course_id": self.course_id,
            "session_id": self.session_id,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "DatasetSelector":
        return cls(
            kind=obj.get("kind", ""),
            course_id=obj.get("course_id"),
            session_id=obj.get("session_id"),
        )


@dataclass(frozen=True)
class ExportDecision:
    path: str
    allowed: bool
    reason: str


# ---------------------------------------------------------------------------
# export policy enforcement


def _normalize_relative(path: str) -> Optional[str]:
    """Normalized relative path, or None when it escapes the output tree."""
    if not path or path.startswith("/") or "\\" in path:
        return None
    norm = posixpath.normpath(path)
    if norm.startswith("..") or norm == "." or norm.startswith("/"):
        return None
    return norm


def _pattern_matches(pattern: str, path: str) -> bool:
    """Glob match where '*' and '?' never cross a '/' separator."""
    p_parts = pattern.split("/")
    parts = path.split("/")
    if len(p_parts) != len(parts):
        return False
    return all(fnmatchcase(part, pat) for pat, part in zip(p_parts, parts))


def check_export(
    sizes: Mapping[str, int], policy: AccessPolicy
) -> Tuple[ExportDecision, ...]:
    """Decide, path by path, what a stage may export.

    A path is allowed iff it is a clean relative path, matches some
    allowlist pattern, and fits in what remains of the byte quota. Paths
    are processed in sorted order so quota exhaustion is deterministic.
    """
    decisions = []
    remaining = policy.max_export_bytes
    for path in sorted(sizes):
        norm = _normalize_relative(path)
        if norm is None:
            decisions.append(ExportDecision(path, False, "traversal"))
            continue
        if not any(_pattern_matches(p, norm) for p in policy.export_allowlist):
            decisions.append(ExportDecision(path, False, "not allowlisted"))
            continue
        size = int(sizes[path])
        if size > remaining:
            decisions.append(ExportDecision(path, False, "quota"))
            continue
        remaining -= size
        decisions.append(ExportDecision(path, True, "allowed"))
    return tuple(decisions)


# ---------------------------------------------------------------------------
# registry


def _session_from_json(obj: dict) -> Session:
    return Session(
        session_id=obj["session_id"],
        start_date=dt.date.fromisoformat(obj["start_date"]),
        num_weeks=int(obj["num_weeks"]),
        data_files=tuple(
            DataFile(path=f["path"], digest=f["digest"], size=int(f["size"]))
            for f in obj["data_files"]
        ),
    )


def _course_to_json(course: Course) -> dict:
    return {
        "course_id": course.course_id,
        "platform_schema": course.platform_schema,
        "sessions": [
            {
                "session_id": s.session_id,
                "start_date": s.start_date.isoformat(),
                "num_weeks": s.num_weeks,
                "data_files": [
                    {"path": f.path, "digest": f.digest, "size": f.size}
                    for f in s.data_files
                ],
            }
            for s in course.sessions
        ],
    }


class Registry:
    """File-backed course catalog; many readers, registrations serialized."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.data_dir = self.root / "data"
        self.index_dir = self.root / "index"
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.index_dir.mkdir(parents=True, exist_ok=True)
        self._write_lock = threading.Lock()

    # -- paths ------------------------------------------------------------

    def course_dir(self, course_id: str) -> Path:
        return self.data_dir / course_id

    def session_dir(self, course_id: str, session_id: str) -> Path:
        return self.data_dir / course_id / session_id

    def _index_path(self, course_id: str) -> Path:
        return self.index_dir / f"{course_id}.json"

    # -- registration -------------------------------------------------------

    def register_course(self, descriptor: dict) -> Course:
        """Register a course from its descriptor document.

        The descriptor lists sessions and their files (paths relative to
        the session directory, optional expected digests). Files must
        already sit under data/<course>/<session>/; their digests are
        computed here and become the registered truth. Re-registering an
        identical descriptor is a no-op; conflicting content is an error.
        """
        course_id = descriptor.get("course_id")
        if not course_id:
            raise RegistryError("descriptor missing course_id")
        sessions = []
        for sess in descriptor.get("sessions", []):
            session_id = sess.get("session_id")
            if not session_id:
                raise RegistryError("session missing session_id")
            sdir = self.session_dir(course_id, session_id)
            files = []
            for entry in sess.get("files", []):
                if isinstance(entry, str):
                    rel, expected = entry, None
                else:
                    rel, expected = entry["path"], entry.get("digest")
                norm = _normalize_relative(rel)
                if norm is None:
                    raise RegistryError(f"bad data file path {rel!r}")
                fpath = sdir / norm
                if not fpath.is_file():
                    raise RegistryError(f"file not found: {fpath}")
                digest = sha256_file(fpath)
                if expected is not None and expected != digest:
                    raise RegistryError(
                        f"digest mismatch for {norm!r}: descriptor says "
                        f"{expected[:12]}..., file is {digest[:12]}..."
                    )
                files.append(DataFile(path=norm, digest=digest, size=fpath.stat().st_size))
            sessions.append(
                Session(
                    session_id=session_id,
                    start_date=dt.date.fromisoformat(sess["start_date"]),
                    num_weeks=int(sess["num_weeks"]),
                    data_files=tuple(sorted(files, key=lambda f: f.path)),
                )
            )
        course = Course(
            course_id=course_id,
            platform_schema=descriptor.get("platform_schema", "event-log-v1"),
            sessions=tuple(sorted(sessions, key=lambda s: (s.start_date, s.session_id))),
        )
        payload = canonical_json_bytes(_course_to_json(course))
        with self._write_lock:
            index_path = self._index_path(course_id)
            if index_path.exists():
                if index_path.read_bytes() == payload:
                    return course
                raise RegistryError(
                    f"course {course_id!r} already registered with different content"
                )
            tmp = index_path.with_suffix(".tmp")
            tmp.write_bytes(payload)
            tmp.replace(index_path)
        return course

    # -- lookup -------------------------------------------------------------

    def course_ids(self) -> List[str]:
        return sorted(p.stem for p in self.index_dir.glob("*.json"))

    def load_course(self, course_id: str) -> Course:
        path = self._index_path(course_id)
        if not path.exists():
            raise RegistryError(f"unknown course {course_id!r}")
        obj = json.loads(path.read_text("utf-8"))
        return Course(
            course_id=obj["course_id"],
            platform_schema=obj["platform_schema"],
            sessions=tuple(_session_from_json(s) for s in obj["sessions"]),
        )

    def resolve_selector(self, selector: DatasetSelector) -> List[Tuple[str, str]]:
        """Expand a selector into (course_id, session_id) pairs.

        Deterministic: courses sort by id, sessions by start date (ties by
        session id, though registered courses never have date ties).
        """
        if selector.kind == "single_session":
            course = self.load_course(selector.course_id)
            return [(course.course_id, course.session(selector.session_id).session_id)]
        if selector.kind == "whole_course":
            course = self.load_course(selector.course_id)
            ordered = sorted(course.sessions, key=lambda s: (s.start_date, s.session_id))
            return [(course.course_id, s.session_id) for s in ordered]
        pairs = []
        for course_id in self.course_ids():
            course = self.load_course(course_id)
            ordered = sorted(course.sessions, key=lambda s: (s.start_date, s.session_id))
            pairs.extend((course.course_id, s.session_id) for s in ordered)
        return pairs

    def verify_course(self, course_id: str) -> None:
        """Recompute digests of every registered file; raise on drift."""
        course = self.load_course(course_id)
        for session in course.sessions:
            sdir = self.session_dir(course_id, session.session_id)
            for f in session.data_files:
                path = sdir / f.path
                if not path.is_file():
                    raise RegistryError(f"missing data file {path}")
                digest = sha256_file(path)
                if digest != f.digest:
                    raise RegistryError(
                        f"data drift in {path}: registered {f.digest[:12]}..., "
                        f"found {digest[:12]}..."
                    )
