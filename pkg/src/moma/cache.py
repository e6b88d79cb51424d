"""Content-addressed store for agent outputs.

One JSON file per key under the cache directory. Keys are SHA-256 digests of
everything that determines the output, so two writers of the same key always
write the same value and writes never conflict in content.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import tempfile
import threading
from pathlib import Path
from typing import Callable

from .agents import AgentConfig


class CacheError(RuntimeError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def key_material(cfg: AgentConfig, prompt: str, attachment_digests=(), route: str | None = None) -> dict:
    material = {
        "agent_id": cfg.agent_id,
        "model_name": cfg.model_name,
        "sampling": cfg.sampling_params(),
        "prompt": prompt,
        "attachments": list(attachment_digests),
    }
    if route is not None:
        material["route"] = route
    return material


def cache_key(cfg: AgentConfig, prompt: str, attachment_digests=(), route: str | None = None) -> str:
    return sha256_text(canonical_json(key_material(cfg, prompt, attachment_digests, route)))


class SummaryCache:
    """Disk-backed when given a directory, in-memory otherwise."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._memory: dict[str, dict] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def _lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> dict | None:
        record = self._memory.get(key)
        if record is None and self.directory is not None:
            path = self._path(key)
            if path.exists():
                try:
                    record = json.loads(path.read_text(encoding="utf-8"))
                except ValueError as exc:
                    raise CacheError(f"corrupt cache entry {path}: {exc}") from None
                self._memory[key] = record
        with self._guard:
            if record is None:
                self.misses += 1
            else:
                self.hits += 1
        return record

    def put(self, record: dict) -> None:
        with self._lock(record["cache_key"]):
            self._store(record)

    def get_or_create(self, key: str, produce: Callable[[], dict]) -> tuple[dict, bool]:
        """Cached record for key, or produce() stored under it; (record, created).

        The per-key lock is held while producing, so concurrent callers of one key
        make a single backend call and the rest read its record.
        """
        with self._lock(key):
            record = self.get(key)
            if record is not None:
                return record, False
            record = produce()
            self._store(record)
            return record, True

    def _store(self, record: dict) -> None:
        key = record["cache_key"]
        self._memory[key] = record
        if self.directory is None:
            return
        path = self._path(key)
        if path.exists():
            return
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=f".{key[:8]}", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(canonical_json(record) + "\n")
        os.replace(tmp, path)

    def __contains__(self, key: str) -> bool:
        return key in self._memory or (self.directory is not None and self._path(key).exists())


def new_record(key: str, cfg: AgentConfig, prompt: str, source: dict, **payload) -> dict:
    return {
        "cache_key": key,
        "source": source,
        "agent_id": cfg.agent_id,
        "model_name": cfg.model_name,
        "sampling": cfg.sampling_params(),
        "prompt_sha256": sha256_text(prompt),
        "backend_fingerprint": cfg.fingerprint,
        "created_at": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        **payload,
    }


def check_record(record: dict, cfg: AgentConfig, prompt: str) -> None:
    """A hit is only served when the stored record matches the recomputed request."""
    if (record.get("prompt_sha256") != sha256_text(prompt)
            or record.get("model_name") != cfg.model_name
            or record.get("sampling") != cfg.sampling_params()
            or record.get("agent_id") != cfg.agent_id):
        raise CacheError(f"cache entry {record.get('cache_key')} does not match its request")
