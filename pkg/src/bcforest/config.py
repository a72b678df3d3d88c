"""Flat ``key = value`` run configuration and run manifests.

Config grammar, one setting per line::

    # comment
    iterations = 4000
    col = x5:categorical      # repeatable keys may appear on several lines

Keys are command-line flag names without the leading dashes (``burn-in`` and
``burn_in`` are the same key). A JSON run manifest is also accepted as a
config file; its ``config`` block is used.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .data import ValidationError


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def parse_config(text: str, source: str = "<config>") -> dict[str, list[str]]:
    """Map each key to the list of values it was given, in file order."""
    out: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq or not key.strip():
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        out.setdefault(normalize_key(key), []).append(value.strip())
    return out


def load_config(path) -> dict[str, list[str]]:
    """Read a key=value file, or the ``config`` block of a run manifest."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            block = json.loads(text)["config"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"{path}: not a run manifest ({exc})") from None
        out = {}
        for key, value in block.items():
            if value is None:
                continue
            values = value if isinstance(value, list) else [value]
            out[normalize_key(key)] = [v if isinstance(v, str) else json.dumps(v) for v in values]
        return out
    return parse_config(text, str(path))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path, data: str | bytes):
    """Write via a temporary file in the same directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@contextmanager
def atomic_target(path):
    """Yield a temporary path next to ``path``; it replaces ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Provenance for one output set: resolved settings, seed, version,
    input digests and wall-clock bounds."""

    command: str
    config: dict
    seed: int
    version: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""

    def add_input(self, path):
        self.inputs[str(path)] = sha256_file(path)

    def write(self, path):
        atomic_write(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
