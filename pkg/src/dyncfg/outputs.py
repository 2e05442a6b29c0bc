"""Atomic output files and run manifests.

Every file goes through :class:`OutputWriter`, which writes to a temporary
name and renames it into place and records the sha256 of the bytes written.
The manifest is written when a run starts and rewritten with the file
checksums when it finishes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

MANIFEST = "manifest.json"


class OutputExistsError(FileExistsError):
    pass


class ChecksumError(ValueError):
    def __init__(self, problems):
        self.problems = problems
        super().__init__("; ".join(problems))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path, data: bytes) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return sha256_bytes(data)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    master_seed: int
    tool_version: str
    config: str = ""
    started: str = ""
    finished: str | None = None
    status: str = "running"
    evaluator_artifacts: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    def to_json(self) -> bytes:
        return (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode("utf-8")

    @classmethod
    def from_json(cls, data) -> "RunManifest":
        return cls(**json.loads(data))


class OutputWriter:
    """Funnel for every file a run writes into ``root``."""

    def __init__(self, root, manifest: RunManifest, force: bool = False):
        self.root = Path(root)
        if (self.root / MANIFEST).exists() and not force:
            raise OutputExistsError(f"{self.root} already holds a run; pass --force to overwrite")
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest
        manifest.started = manifest.started or _now()
        self._flush()

    def _flush(self):
        atomic_write(self.root / MANIFEST, self.manifest.to_json())

    def write_bytes(self, rel: str, data: bytes) -> Path:
        path = self.root / rel
        self.manifest.files[rel] = atomic_write(path, data)
        return path

    def write_text(self, rel: str, text: str) -> Path:
        return self.write_bytes(rel, text.encode("utf-8"))

    def record_artifact(self, name: str, digest: str):
        self.manifest.evaluator_artifacts[name] = digest

    def finalize(self) -> RunManifest:
        self.manifest.status = "complete"
        self.manifest.finished = _now()
        self._flush()
        return self.manifest


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def read_manifest(root) -> RunManifest:
    return RunManifest.from_json((Path(root) / MANIFEST).read_bytes())


def verify_outputs(root) -> RunManifest:
    """Recompute every recorded checksum; raises ChecksumError listing mismatches."""
    root = Path(root)
    man = read_manifest(root)
    problems = []
    if man.status != "complete":
        problems.append(f"run status is {man.status!r}")
    for rel, digest in sorted(man.files.items()):
        path = root / rel
        if not path.exists():
            problems.append(f"{path}: missing")
        elif sha256_file(path) != digest:
            problems.append(f"{path}: checksum mismatch")
    if problems:
        raise ChecksumError(problems)
    return man


def read_csv(path) -> tuple[dict, list, list]:
    """Returns (meta from the comment line, header, rows as strings)."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        meta = {}
        if first.startswith("#"):
            for tok in first[1:].split():
                k, _, v = tok.partition("=")
                meta[k] = v
        else:
            fh.seek(0)
        reader = csv.reader(fh)
        header = next(reader, [])
        return meta, header, [r for r in reader]
