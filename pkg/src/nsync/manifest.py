"""Run manifests: everything needed to reproduce one command invocation."""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from nsync import __version__, _kernels
from nsync.records import sha256_file, write_json

SCHEDULE_NOTE = "linear beta schedule; a stand-in since the base model's training schedule is not given"


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    dataset_hashes: dict = field(default_factory=dict)
    variant: str | None = None
    interpretation_flags: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    tool_version: str = __version__
    kernel_backend: str = _kernels.BACKEND
    schedule_note: str = SCHEDULE_NOTE

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def hash_inputs(**paths) -> dict:
    return {name: sha256_file(p) for name, p in paths.items() if p is not None}


@contextmanager
def staged_dir(out):
    """Yield a scratch directory whose files move into ``out`` only on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}.stage-"))
    try:
        yield stage
        out.mkdir(parents=True, exist_ok=True)
        for root, _, files in os.walk(stage):
            rel = Path(root).relative_to(stage)
            (out / rel).mkdir(parents=True, exist_ok=True)
            for f in sorted(files):
                os.replace(Path(root) / f, out / rel / f)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
