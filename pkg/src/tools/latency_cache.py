import hashlib
import json
import os
import threading
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import pandas as pd
from filelock import FileLock

from src.errors import CacheFingerprintError, ManifestError
from src.models.graph_models import ModelGraph, Signature
from src.models.latency_models import BenchmarkProtocol, CacheEvent, CacheStats
from src.tools.latency import LatencyProvider
from src.tools.model_io import model_fingerprint
from src.utils import logger


def cache_fingerprint(root: ModelGraph, provider: LatencyProvider) -> str:
    """A cache is only valid for one root architecture measured by one provider configuration."""
    payload = model_fingerprint(root) + json.dumps(provider.fingerprint_params(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def events_path(cache_path: Path) -> Path:
    return Path(f"{cache_path}.events.csv")


class LatencyCache:
    """
    Signature -> milliseconds, persisted as line-delimited JSON after a fingerprint header.
    Every new measurement is appended and fsynced at once, so a crash loses at most the
    in-flight entry. `path=None` keeps the cache in memory; `enabled=False` always measures.
    """
    def __init__(self, path: Optional[Path], fingerprint: str, enabled: bool = True):
        self.path = Path(path) if path else None
        self.fingerprint = fingerprint
        self.enabled = enabled
        self.entries: Dict[Tuple[int, ...], float] = {}
        self.hits = 0
        self.misses = 0
        self.events: List[CacheEvent] = []
        self._lock = threading.Lock()
        self._inflight: Dict[Tuple[int, ...], threading.Lock] = {}
        if self.path is not None:
            self._file_lock = FileLock(f"{self.path}.lock")
            self._load()

    def _load(self) -> None:
        with self._file_lock:
            if not self.path.exists() or self.path.stat().st_size == 0:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self._append({"fingerprint": self.fingerprint})
                logger.info(f"Created latency cache {self.path}")
                return

            raw = self.path.read_bytes()
            good_end = raw.rfind(b"\n") + 1
            lines = raw[:good_end].decode('utf-8').splitlines()
            try:
                header = json.loads(lines[0]) if lines else {}
            except json.JSONDecodeError:
                header = {}
            if header.get("fingerprint") != self.fingerprint:
                logger.error(f"Latency cache {self.path} belongs to another model or provider configuration")
                raise CacheFingerprintError(
                    f"cache {self.path} has fingerprint {header.get('fingerprint')}, expected {self.fingerprint}"
                )
            if good_end < len(raw):
                logger.warning(f"Latency cache {self.path} ends with a truncated record; dropping it")
                with open(self.path, 'r+b') as f:
                    f.truncate(good_end)

        for number, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                raise ManifestError(f"{self.path}:{number}: corrupt cache record")
            self.entries.setdefault(tuple(int(c) for c in record["signature"]), float(record["ms"]))
        logger.info(f"Loaded latency cache {self.path} with {len(self.entries)} entries")

    def _append(self, record: dict) -> None:
        with open(self.path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record) + "\n")
            f.flush()
            os.fsync(f.fileno())

    def lookup(self, signature: Signature) -> Optional[float]:
        if not self.enabled:
            return None
        with self._lock:
            return self.entries.get(tuple(signature.counts))

    def store(self, signature: Signature, ms: float) -> None:
        key = tuple(signature.counts)
        with self._lock:
            if key in self.entries:
                return
            self.entries[key] = ms
        if self.path is not None and self.enabled:
            with self._file_lock:
                self._append({"signature": list(key), "ms": ms})

    def record(self, event: str, signature: Signature) -> None:
        with self._lock:
            if event == "hit":
                self.hits += 1
            else:
                self.misses += 1
            self.events.append(CacheEvent(index=len(self.events), event=event, signature=tuple(signature.counts)))

    def flight_lock(self, signature: Signature) -> threading.Lock:
        with self._lock:
            return self._inflight.setdefault(tuple(signature.counts), threading.Lock())

    def stats(self) -> CacheStats:
        with self._lock:
            total = self.hits + self.misses
            return CacheStats(
                hits=self.hits,
                misses=self.misses,
                hit_rate=self.hits / total if total else 0.0,
                entries=len(self.entries),
                events=list(self.events),
            )

    def save_events(self, path: Optional[Path] = None) -> Optional[Path]:
        """Writes the hit/miss timeline as CSV (index, event, signature)."""
        target = Path(path) if path else (events_path(self.path) if self.path else None)
        if target is None:
            return None
        frame = pd.DataFrame(
            [{"index": e.index, "event": e.event, "signature": " ".join(map(str, e.signature))} for e in self.events],
            columns=["index", "event", "signature"],
        )
        frame.to_csv(target, index=False)
        logger.info(f"Saved cache timeline ({len(frame)} queries) to {target}")
        return target


def load_cache_stats(cache_path: Path) -> CacheStats:
    """Stats of the last run that used `cache_path`, read back from its events CSV."""
    cache_path = Path(cache_path)
    entries = 0
    if cache_path.exists():
        entries = sum(1 for line in cache_path.read_text(encoding='utf-8').splitlines()
                      if line.strip() and '"signature"' in line)
    timeline = events_path(cache_path)
    if not timeline.exists():
        return CacheStats(entries=entries)
    frame = pd.read_csv(timeline, dtype={"signature": str}, keep_default_na=False)
    events = [
        CacheEvent(index=int(row["index"]), event=row["event"],
                   signature=tuple(int(c) for c in str(row["signature"]).split()))
        for _, row in frame.iterrows()
    ]
    hits = sum(1 for e in events if e.event == "hit")
    return CacheStats(hits=hits, misses=len(events) - hits, hit_rate=hits / len(events) if events else 0.0,
                      entries=entries, events=events)


def get_or_measure(cache: LatencyCache, provider: LatencyProvider, model: Optional[ModelGraph],
                   signature: Signature, materialize: Optional[Callable[[], ModelGraph]] = None,
                   protocol: Optional[BenchmarkProtocol] = None) -> float:
    """
    Cached latency of `signature`. Concurrent callers asking for the same unmeasured
    signature trigger exactly one provider call. Provider errors propagate and nothing is stored.
    """
    cached = cache.lookup(signature)
    if cached is not None:
        cache.record("hit", signature)
        return cached

    with cache.flight_lock(signature):
        cached = cache.lookup(signature)
        if cached is not None:
            cache.record("hit", signature)
            return cached
        if model is None and provider.consumes_model and materialize is not None:
            model = materialize()
        ms = provider.measure(model, signature, protocol or BenchmarkProtocol.exploration())
        cache.store(signature, ms)
        cache.record("miss", signature)
        return ms
