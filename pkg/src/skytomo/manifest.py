"""Run manifests: what a command was asked to do, with which inputs, and what it wrote."""

import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"


def file_hash(path) -> str:
    h = hashlib.sha256()
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in files:
        if p.name == MANIFEST_NAME:
            continue
        h.update(p.name.encode())
        with p.open("rb") as f:
            for block in iter(lambda: f.read(1 << 20), b""):
                h.update(block)
    return h.hexdigest()


def array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    return v


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)  # name -> sha256
    outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    environment: dict = field(default_factory=lambda: {"python": platform.python_version(),
                                                        "numpy": np.__version__})
    started: float = field(default_factory=time.time)

    def add_input(self, name: str, path) -> None:
        self.inputs[name] = file_hash(path)

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def write(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / MANIFEST_NAME
        path.write_text(json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True) + "\n")
        return path


def read_manifest(run_dir) -> dict:
    return json.loads((Path(run_dir) / MANIFEST_NAME).read_text())
