"""Near-line rewrite serving: decode once, keep the top tag-1 rewrites, cache them with a TTL."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

from .catalog import tokenize
from .evaluation import select_rewrites

log = logging.getLogger(__name__)

DEFAULT_TTL = 14 * 24 * 3600.0
UNIT_SEP = "\x1f"


def cache_key(query: str) -> str:
    return " ".join(tokenize(query))


@dataclass(frozen=True)
class CacheEntry:
    query: str
    rewrites: tuple[str, ...]
    created_at: float

    def __post_init__(self) -> None:
        if len(self.rewrites) > 3:
            raise ValueError("at most 3 rewrites per entry")


class RewriteCache:
    """Query -> rewrites with expiry. Entries are dropped wholesale when the model hash changes.

    On disk: a ``#model<TAB>hash`` header, then one
    ``query<TAB>created_at<TAB>rewrites joined by 0x1f`` line per entry.
    """

    def __init__(self, ttl: float = DEFAULT_TTL, clock=time.time, model_hash: str = "", path=None):
        if ttl <= 0:
            raise ValueError("ttl must be > 0")
        self.ttl = ttl
        self.clock = clock
        self.model_hash = model_hash
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, CacheEntry] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, query: str, now: float | None = None) -> CacheEntry | None:
        now = self.clock() if now is None else now
        entry = self._entries.get(cache_key(query))
        if entry is None or now - entry.created_at >= self.ttl:
            return None
        return entry

    def put(self, query: str, rewrites, now: float | None = None) -> CacheEntry:
        now = self.clock() if now is None else now
        entry = CacheEntry(cache_key(query), tuple(rewrites), float(now))
        self._entries[entry.query] = entry
        return entry

    def invalidate(self, model_hash: str) -> None:
        if model_hash != self.model_hash:
            self._entries.clear()
            self.model_hash = model_hash

    def save(self, path=None) -> None:
        path = Path(path or self.path)
        lines = [f"#model\t{self.model_hash}"]
        for key in sorted(self._entries):
            e = self._entries[key]
            lines.append(f"{e.query}\t{e.created_at!r}\t{UNIT_SEP.join(e.rewrites)}")
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
        os.replace(tmp, path)

    def _load(self) -> None:
        lines = self.path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#model\t"):
            raise ValueError(f"{self.path}: missing cache header")
        stored = lines[0].split("\t", 1)[1]
        if stored != self.model_hash:
            log.info("cache written by model %s, serving %s: starting empty", stored, self.model_hash)
            return
        for line in lines[1:]:
            query, created, joined = line.split("\t")
            rewrites = tuple(joined.split(UNIT_SEP)) if joined else ()
            self._entries[query] = CacheEntry(query, rewrites, float(created))


class RewriteServer:
    """Serves at most ``top_k`` rewrites per query, decoding only on a cache miss."""

    def __init__(self, policy, cache: RewriteCache, beam_size: int = 10, max_len: int = 16, top_k: int = 3):
        if not policy.tagged:
            raise ValueError("serving needs a tagged policy")
        self.policy = policy
        self.cache = cache
        self.beam_size = beam_size
        self.max_len = max_len
        self.top_k = top_k
        self.decodes = 0
        self.hits = 0

    def serve(self, query: str, now: float | None = None) -> list[str]:
        now = self.cache.clock() if now is None else now
        entry = self.cache.get(query, now)
        if entry is not None:
            self.hits += 1
            log.info("cache hit for %r", query)
            return list(entry.rewrites)
        self.decodes += 1
        log.info("cache miss for %r: decoding", query)
        # survivors are in beam order, i.e. by sequence log-probability
        rewrites = select_rewrites(self.policy, cache_key(query), self.beam_size, self.max_len).survivors
        return list(self.cache.put(query, rewrites[: self.top_k], now).rewrites)


def serve_rewrites(policy, query: str, cache: RewriteCache, now: float | None = None, beam_size: int = 10,
                   max_len: int = 16) -> list[str]:
    return RewriteServer(policy, cache, beam_size, max_len).serve(query, now)
