"""News and behavior ingestion: vocabulary, tokenized articles, impressions.

News files come either as MIND-layout TSV
(news_id, category, subcategory, title, abstract, url, entities...)
or as JSON lines with keys {id, category, title, abstract}. Behavior files
are MIND-layout TSV (impression_id, user_id, time, space-separated history,
space-separated "newsid-label" impressions).
"""

import json
import re
from collections import Counter
from dataclasses import dataclass, field

# The five special ids, fixed in this order.
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")

# Lowercased word-or-punctuation tokenizer; deterministic across platforms.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    """Raised for unreadable, empty, or malformed corpus inputs."""


def split_text(text):
    """Lowercase and split on whitespace/punctuation boundaries."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bidirectional token <-> id map with the five specials at ids 0..4."""

    def __init__(self, tokens):
        self.id_to_token = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            dupes = [t for t, c in Counter(self.id_to_token).items() if c > 1]
            raise CorpusError(f"vocabulary has duplicate tokens: {dupes}")

    def __len__(self):
        return len(self.id_to_token)

    def id_for(self, token):
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.id_for(t) for t in tokens]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.id_to_token:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if lines[: len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise CorpusError(f"{path}: vocabulary file does not start with the special tokens")
        return cls(lines[len(SPECIAL_TOKENS):])


def load_news(path):
    """Read raw news rows as dicts with keys id, category, title, abstract."""
    rows = []
    path = str(path)
    if path.endswith(".jsonl"):
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                for key in ("id", "category", "title", "abstract"):
                    if key not in row:
                        raise CorpusError(f"{path}:{line_no}: news row missing field '{key}'")
                rows.append({k: row[k] for k in ("id", "category", "title", "abstract")})
        return rows
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 5:
                raise CorpusError(f"{path}:{line_no}: expected >=5 tab-separated columns, got {len(cols)}")
            rows.append({"id": cols[0], "category": cols[1], "title": cols[3], "abstract": cols[4]})
    return rows


def build_vocabulary(news_path, min_count=1):
    """Count tokens over title, abstract, and category of every news row.

    Tokens at or above ``min_count`` enter the vocabulary, ordered by
    descending frequency with lexicographic tie-breaks; specials come first.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    for row in load_news(news_path):
        counts.update(split_text(row["title"]))
        counts.update(split_text(row["abstract"]))
        cat = row["category"].strip().lower()
        if cat:
            counts[cat] += 1
    if not counts:
        raise CorpusError(f"{news_path}: corpus is empty, no tokens found")
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass(frozen=True)
class FieldLimits:
    title: int = 20
    category: int = 1
    abstract: int = 40

    def __post_init__(self):
        if min(self.title, self.category, self.abstract) < 1:
            raise ValueError(f"field limits must be >= 1, got {self}")


@dataclass(frozen=True)
class NewsArticle:
    news_id: str
    title_tokens: tuple
    category_tokens: tuple
    abstract_tokens: tuple

    def fields(self):
        return (self.title_tokens, self.category_tokens, self.abstract_tokens)


def tokenize_news(raw, vocab, limits):
    """Tokenize one raw news row into id sequences, truncated per field.

    The category is kept as a single atomic token; out-of-vocabulary
    tokens map to UNK; an empty field yields an empty sequence.
    """
    for key in ("id", "category", "title", "abstract"):
        if key not in raw:
            raise CorpusError(f"news row missing field '{key}'")
    title = vocab.encode(split_text(raw["title"]))[: limits.title]
    cat = raw["category"].strip().lower()
    category = [vocab.id_for(cat)][: limits.category] if cat else []
    abstract = vocab.encode(split_text(raw["abstract"]))[: limits.abstract]
    return NewsArticle(raw["id"], tuple(title), tuple(category), tuple(abstract))


def tokenize_corpus(rows, vocab, limits):
    """Tokenize all rows into a news_id -> NewsArticle map."""
    articles = {}
    dupes = []
    for raw in rows:
        art = tokenize_news(raw, vocab, limits)
        if art.news_id in articles:
            dupes.append(art.news_id)
        articles[art.news_id] = art
    if dupes:
        raise CorpusError(f"duplicate news ids in corpus: {sorted(set(dupes))}")
    return articles


@dataclass(frozen=True)
class ImpressionRecord:
    user_id: str
    history: tuple          # clicked news_ids, chronological
    candidates: tuple       # (news_id, label) pairs, label in {0, 1}
    row_index: int = 0


@dataclass
class BehaviorLoad:
    records: list = field(default_factory=list)
    dropped: int = 0


def load_behaviors(path, corpus, max_history=30, unknown_policy="drop"):
    """Parse a behaviors TSV against a loaded news corpus.

    Histories keep the most recent ``max_history`` entries. Records that
    reference a news_id absent from ``corpus`` are handled per policy:
    "drop" (default) discards and counts the record, "prune" removes the
    unknown ids, "error" raises.
    """
    if unknown_policy not in ("drop", "prune", "error"):
        raise ValueError(f"unknown_policy must be drop/prune/error, got {unknown_policy!r}")
    result = BehaviorLoad()
    with open(path, encoding="utf-8") as f:
        for row_index, line in enumerate(f):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 5:
                raise CorpusError(f"{path}:{row_index + 1}: expected 5 tab-separated columns, got {len(cols)}")
            _, user_id, _, hist_str, imp_str = cols[:5]
            history = hist_str.split() if hist_str.strip() else []
            candidates = []
            for item in imp_str.split():
                news_id, _, label = item.rpartition("-")
                if not news_id or label not in ("0", "1"):
                    raise CorpusError(f"{path}:{row_index + 1}: malformed impression entry {item!r}")
                candidates.append((news_id, int(label)))
            if not candidates:
                raise CorpusError(f"{path}:{row_index + 1}: impression row with no candidates")

            unknown = [n for n in history if n not in corpus]
            unknown += [n for n, _ in candidates if n not in corpus]
            if unknown:
                if unknown_policy == "error":
                    raise CorpusError(f"{path}:{row_index + 1}: unknown news ids {sorted(set(unknown))}")
                if unknown_policy == "drop":
                    result.dropped += 1
                    continue
                history = [n for n in history if n in corpus]
                candidates = [(n, l) for n, l in candidates if n in corpus]
                if not candidates:
                    result.dropped += 1
                    continue
            history = history[-max_history:]
            result.records.append(ImpressionRecord(user_id, tuple(history), tuple(candidates), row_index))
    return result
