"""Frozen news-representation cache: encode every article exactly once.

Cache file layout (little-endian):

    magic      4 bytes b"OLEC"
    version    u32
    d          u32
    count      u64
    model_hash 32 bytes (sha256 of the producing checkpoint)
    vocab_hash 32 bytes (sha256 of the vocabulary file)
    per entry: id_len u32, id UTF-8, d * f64
"""

import struct
import time
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"OLEC"
VERSION = 1

# Reserved id used to pad histories; always looks up as the zero vector.
PAD_NEWS_ID = ""


class CacheError(IOError):
    """Cache file is malformed or an entry is missing."""


class ProvenanceError(CacheError):
    """Cache hashes do not match the expected checkpoint or vocabulary."""


@dataclass
class EncoderCallCounter:
    """Counts encoder forward invocations per article, by role."""

    cache_build_calls: int = 0
    downstream_calls: int = 0

    def add(self, role, n):
        if role == "cache_build":
            self.cache_build_calls += n
        elif role == "downstream":
            self.downstream_calls += n
        else:
            raise ValueError(f"unknown encoder role {role!r}")


@dataclass
class RepresentationCache:
    d: int
    entries: dict                 # news_id -> (d,) float64, read-only
    model_hash: bytes
    vocab_hash: bytes
    created_at: float = field(default_factory=time.time)

    def __eq__(self, other):
        # created_at is not persisted in the file format, so identity is
        # dimensions, hashes, and bitwise-equal vectors in order.
        if not isinstance(other, RepresentationCache):
            return NotImplemented
        return (
            self.d == other.d
            and self.model_hash == other.model_hash
            and self.vocab_hash == other.vocab_hash
            and list(self.entries) == list(other.entries)
            and all(np.array_equal(self.entries[k], other.entries[k]) for k in self.entries)
        )

    def __len__(self):
        return len(self.entries)


def build_cache(model, articles, model_hash, vocab_hash, counter=None, batch_size=128):
    """Encode the full corpus once with a frozen encoder.

    Encoder invocations equal the corpus size; duplicate news ids are an
    error. Vectors are stored read-only.
    """
    articles = list(articles)
    seen, dupes = set(), []
    for a in articles:
        if a.news_id in seen:
            dupes.append(a.news_id)
        seen.add(a.news_id)
    if dupes:
        raise CacheError(f"duplicate news ids in corpus: {sorted(set(dupes))}")
    entries = {}
    for start in range(0, len(articles), batch_size):
        batch = articles[start:start + batch_size]
        vecs = model.encode(batch, counter=counter, role="cache_build").data
        for art, vec in zip(batch, vecs):
            v = np.array(vec, dtype=np.float64)
            v.flags.writeable = False
            entries[art.news_id] = v
    return RepresentationCache(model.cfg.d, entries, model_hash, vocab_hash)


def save_cache(cache, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, cache.d))
        f.write(struct.pack("<Q", len(cache.entries)))
        f.write(cache.model_hash)
        f.write(cache.vocab_hash)
        for news_id, vec in cache.entries.items():
            raw = news_id.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def _read(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CacheError(f"cache truncated while reading {what}")
    return buf


def load_cache(path, expect_model_hash=None, expect_vocab_hash=None):
    """Load a cache, refusing when provenance hashes do not match."""
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != MAGIC:
            raise CacheError(f"{path}: bad magic, not a representation cache")
        version, d = struct.unpack("<II", _read(f, 8, "header"))
        if version != VERSION:
            raise CacheError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<Q", _read(f, 8, "entry count"))
        model_hash = _read(f, 32, "model hash")
        vocab_hash = _read(f, 32, "vocab hash")
        if expect_model_hash is not None and model_hash != expect_model_hash:
            raise ProvenanceError(f"{path}: cache was built from a different model checkpoint")
        if expect_vocab_hash is not None and vocab_hash != expect_vocab_hash:
            raise ProvenanceError(f"{path}: cache was built from a different vocabulary")
        entries = {}
        for _ in range(count):
            (id_len,) = struct.unpack("<I", _read(f, 4, "id length"))
            news_id = _read(f, id_len, "news id").decode("utf-8")
            vec = np.frombuffer(_read(f, 8 * d, f"vector of {news_id}"), dtype="<f8").astype(np.float64)
            vec.flags.writeable = False
            entries[news_id] = vec
        if f.read(1):
            raise CacheError(f"{path}: trailing bytes after {count} entries")
    return RepresentationCache(d, entries, model_hash, vocab_hash)


def lookup(cache, news_ids):
    """Stack cached vectors for a sequence of ids into a (len, d) matrix.

    The reserved PAD id maps to the zero vector; unknown ids are an error.
    The result is a fresh array, never a view into the cache.
    """
    out = np.zeros((len(news_ids), cache.d), dtype=np.float64)
    for i, news_id in enumerate(news_ids):
        if news_id == PAD_NEWS_ID:
            continue
        vec = cache.entries.get(news_id)
        if vec is None:
            raise CacheError(f"news id {news_id!r} not present in cache")
        out[i] = vec
    return out
