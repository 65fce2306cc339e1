"""Seeded synthetic news/behavior generator.

Every user prefers one category and clicks a candidate exactly when its
category matches. Titles and abstracts draw from per-category token pools
plus a shared pool, so article content carries the category signal. A slice
of articles per category is reserved for test-time candidates and never
appears in training or validation logs, which makes the test split a pure
cold-start task: content-based news vectors generalize to the unseen ids,
per-id embeddings cannot.
"""

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SynthConfig:
    categories: int = 4
    articles_per_category: int = 50     # visible during training
    unseen_per_category: int = 12       # test-only candidates
    users: int = 120
    history_len: int = 8
    train_impressions_per_user: int = 3
    val_impressions_per_user: int = 1
    test_impressions_per_user: int = 2
    candidates: int = 5                 # per impression, exactly one positive
    title_len: tuple = (3, 6)           # inclusive range
    abstract_len: tuple = (2, 5)
    tokens_per_category: int = 30
    shared_tokens: int = 20
    seed: int = 0


@dataclass
class SynthData:
    news_rows: list          # raw dicts {id, category, title, abstract}
    train_rows: list         # behaviors TSV rows (already formatted)
    val_rows: list
    test_rows: list
    visible_ids: list
    unseen_ids: list


def _words(prefix, n):
    return [f"{prefix}{i}" for i in range(n)]


def _make_article(rng, cfg, news_id, cat, pool, shared):
    t_lo, t_hi = cfg.title_len
    a_lo, a_hi = cfg.abstract_len
    title = list(rng.choice(pool, size=rng.integers(t_lo, t_hi + 1), replace=True))
    if shared and rng.random() < 0.5:
        title[rng.integers(len(title))] = str(rng.choice(shared))
    abstract = list(rng.choice(pool, size=rng.integers(a_lo, a_hi + 1), replace=True))
    return {"id": news_id, "category": cat,
            "title": " ".join(title), "abstract": " ".join(abstract)}


def _format_row(imp_id, user_id, history, candidates):
    hist = " ".join(history)
    imps = " ".join(f"{n}-{l}" for n, l in candidates)
    return f"{imp_id}\tU{user_id}\t11/11/2019 11:11:11 AM\t{hist}\t{imps}"


def generate(cfg):
    rng = np.random.default_rng(cfg.seed)
    cats = [f"cat{k}" for k in range(cfg.categories)]
    pools = {c: _words(f"{c}w", cfg.tokens_per_category) for c in cats}
    shared = _words("common", cfg.shared_tokens)

    news_rows, visible, unseen = [], {c: [] for c in cats}, {c: [] for c in cats}
    serial = 0
    for c in cats:
        for _ in range(cfg.articles_per_category):
            nid = f"N{serial:05d}"
            serial += 1
            news_rows.append(_make_article(rng, cfg, nid, c, pools[c], shared))
            visible[c].append(nid)
        for _ in range(cfg.unseen_per_category):
            nid = f"N{serial:05d}"
            serial += 1
            news_rows.append(_make_article(rng, cfg, nid, c, pools[c], shared))
            unseen[c].append(nid)

    train_rows, val_rows, test_rows = [], [], []
    imp_serial = 0

    def impression(user, own, items_pos, items_neg, other_cats):
        nonlocal imp_serial
        pos = str(rng.choice(items_pos))
        negs = [str(rng.choice(items_neg[str(rng.choice(other_cats))]))
                for _ in range(cfg.candidates - 1)]
        cands = [(pos, 1)] + [(n, 0) for n in negs]
        rng.shuffle(cands)
        hist = [str(h) for h in rng.choice(visible[own], size=cfg.history_len,
                                           replace=len(visible[own]) < cfg.history_len)]
        row = _format_row(imp_serial, user, hist, cands)
        imp_serial += 1
        return row

    for user in range(cfg.users):
        own = cats[user % len(cats)]
        others = [c for c in cats if c != own]
        for _ in range(cfg.train_impressions_per_user):
            train_rows.append(impression(user, own, visible[own], visible, others))
        for _ in range(cfg.val_impressions_per_user):
            val_rows.append(impression(user, own, visible[own], visible, others))
        for _ in range(cfg.test_impressions_per_user):
            test_rows.append(impression(user, own, unseen[own], unseen, others))

    return SynthData(
        news_rows=news_rows, train_rows=train_rows, val_rows=val_rows, test_rows=test_rows,
        visible_ids=[n for c in cats for n in visible[c]],
        unseen_ids=[n for c in cats for n in unseen[c]],
    )


def write_dataset(data, out_dir):
    """Write news JSONL plus the three behaviors TSVs; returns the paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "news": out_dir / "news.jsonl",
        "behaviors_train": out_dir / "behaviors_train.tsv",
        "behaviors_val": out_dir / "behaviors_val.tsv",
        "behaviors_test": out_dir / "behaviors_test.tsv",
    }
    with open(paths["news"], "w", encoding="utf-8") as f:
        for row in data.news_rows:
            f.write(json.dumps(row) + "\n")
    for key, rows in (("behaviors_train", data.train_rows),
                      ("behaviors_val", data.val_rows),
                      ("behaviors_test", data.test_rows)):
        with open(paths[key], "w", encoding="utf-8") as f:
            for row in rows:
                f.write(row + "\n")
    return paths
