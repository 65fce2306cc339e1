"""Downstream recommenders consuming news vectors from one of three sources.

The matching model scores a candidate by the dot product of a user vector
(multi-head self-attention over history vectors, pooled by additive
attention) and the candidate vector. The ranking model predicts a click
probability from the concatenated mean-pooled history and candidate via a
cross network running parallel to an MLP tower.

News vectors come from a frozen representation cache, a trainable per-id
embedding table, or the text encoder run inside the training loop (the
expensive baseline kept for redundancy and energy comparisons).
"""

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mft import TrainingDiverged
from .nn import AdditiveAttention, Linear, MultiHeadSelfAttention, ParamSet, embedding_init
from .optim import Adam
from .repstore import PAD_NEWS_ID, EncoderCallCounter, lookup
from .tensor import NonFiniteError


class NewsSourceMode(enum.Enum):
    FROZEN_CACHE = "frozen"
    ID_EMBEDDING = "id"
    END_TO_END_TEXT = "e2e"


@dataclass
class DownstreamConfig:
    model: str = "matching"            # "matching" or "ranking"
    mode: NewsSourceMode = NewsSourceMode.FROZEN_CACHE
    d_model: int = 64
    heads: int = 2
    negatives: int = 4                 # sampled negatives per positive
    cross_layers: int = 2
    tower: tuple = (64, 32)
    max_history: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 3
    seed: int = 0


# ---------------------------------------------------------------------------
# news vector sources
# ---------------------------------------------------------------------------

class FrozenCacheSource:
    """Serves constant vectors from a loaded cache; never touches Phi."""

    def __init__(self, cache):
        self.cache = cache
        self.dim = cache.d

    def trainable_params(self):
        return []

    def batch_vectors(self, id_matrix):
        rows = [lookup(self.cache, ids) for ids in id_matrix]
        return T.constant(np.stack(rows))


class IdEmbeddingSource:
    """A trainable per-id vector table; index 0 is the PAD id's zero slot."""

    def __init__(self, news_ids, d_model, seed=0):
        rng = np.random.default_rng(seed)
        self.index = {PAD_NEWS_ID: 0}
        for news_id in news_ids:
            if news_id not in self.index:
                self.index[news_id] = len(self.index)
        self.dim = d_model
        self.params = ParamSet()
        self.table = self.params.add("source.id_table", embedding_init(rng, len(self.index), d_model))

    def trainable_params(self):
        return self.params.all()

    def _ids_to_index(self, id_matrix):
        try:
            return np.array([[self.index[n] for n in row] for row in id_matrix])
        except KeyError as exc:
            raise KeyError(f"news id {exc.args[0]!r} absent from the id-embedding table") from exc

    def batch_vectors(self, id_matrix):
        idx = self._ids_to_index(id_matrix)
        vecs = T.embedding_lookup(self.table, idx)
        # PAD slots must stay exactly zero regardless of table contents.
        keep = (idx != 0)[:, :, None].astype(np.float64)
        return T.rowscale(vecs, T.constant(keep)) if (idx == 0).any() else vecs


class EndToEndTextSource:
    """Encodes news text inside the training loop, once per occurrence.

    Deliberately performs no deduplication: every history entry and every
    candidate in a batch costs one encoder call, which is exactly the
    redundancy the frozen cache removes.
    """

    def __init__(self, mft_model, articles_by_id, counter):
        self.model = mft_model
        self.articles = articles_by_id
        self.counter = counter
        self.dim = mft_model.cfg.d

    def trainable_params(self):
        return self.model.parameters()

    def batch_vectors(self, id_matrix):
        flat = [n for row in id_matrix for n in row]
        real = [n for n in flat if n != PAD_NEWS_ID]
        b, l = len(id_matrix), len(id_matrix[0]) if id_matrix else 0
        if not real:
            return T.constant(np.zeros((b, l, self.dim)))
        encoded = self.model.encode([self.articles[n] for n in real],
                                    counter=self.counter, role="downstream")
        padded = T.concat([encoded, T.constant(np.zeros((1, self.dim)))], axis=0)
        slot = np.full(len(flat), len(real), dtype=np.int64)
        slot[[i for i, n in enumerate(flat) if n != PAD_NEWS_ID]] = np.arange(len(real))
        return T.reshape(T.take_rows(padded, slot), (b, l, self.dim))


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

def _single_history(history_vecs, d_in):
    """(L, d_in) raw history -> (1, L, d) batch; empty becomes one PAD row."""
    hist = np.asarray(history_vecs, dtype=np.float64).reshape(1, -1, d_in)
    if hist.shape[1] == 0:
        return np.zeros((1, 1, d_in)), np.zeros((1, 1), dtype=bool)
    return hist, np.ones((1, hist.shape[1]), dtype=bool)


class MatchingModel:
    """Self-attention user encoder with dot-product candidate scoring."""

    def __init__(self, d_in, d_model, heads=2, use_proj=True, seed=0):
        rng = np.random.default_rng(seed)
        self.d_in, self.d_model, self.use_proj = d_in, d_model, use_proj
        self.params = ParamSet()
        if use_proj:
            self.proj = Linear(self.params, "match.proj", rng, d_in, d_model)
        elif d_in != d_model:
            raise ValueError(f"without projection d_in ({d_in}) must equal d_model ({d_model})")
        self.self_attn = MultiHeadSelfAttention(self.params, "match.self_attn", rng, d_model, heads)
        self.pool = AdditiveAttention(self.params, "match.pool", rng, d_model)

    def _project(self, x):
        return self.proj(x) if self.use_proj else x

    def user_vector(self, hist, hist_mask):
        """(B, L, d_in) histories -> (B, d_model) user vectors."""
        h = self._project(hist)
        attended = self.self_attn(h, hist_mask)
        return self.pool(attended, hist_mask)

    def score_batch(self, hist, hist_mask, cands):
        """Score (B, C, d_in) candidates against (B, L, d_in) histories."""
        u = self.user_vector(hist, hist_mask)
        c = self._project(cands)
        b, n, _ = c.shape
        return T.reshape(T.matmul(c, T.reshape(u, (b, self.d_model, 1))), (b, n))

    def score(self, history_vecs, candidate_vec):
        """Convenience single-pair score from raw vectors."""
        hist, mask = _single_history(history_vecs, self.d_in)
        cand = np.asarray(candidate_vec, dtype=np.float64).reshape(1, 1, self.d_in)
        return float(self.score_batch(T.constant(hist), mask, T.constant(cand)).data[0, 0])

    def parameters(self):
        return self.params.all()


class RankingModel:
    """Cross network + MLP tower over [mean history, candidate] features."""

    def __init__(self, d_in, d_model, cross_layers=2, tower=(64, 32), use_proj=True, seed=0):
        rng = np.random.default_rng(seed)
        self.d_in, self.d_model, self.use_proj = d_in, d_model, use_proj
        self.params = ParamSet()
        if use_proj:
            self.proj = Linear(self.params, "rank.proj", rng, d_in, d_model)
        elif d_in != d_model:
            raise ValueError(f"without projection d_in ({d_in}) must equal d_model ({d_model})")
        width = 2 * d_model
        self.cross_w = [self.params.add(f"rank.cross{k}.w", embedding_init(rng, width, 1))
                        for k in range(cross_layers)]
        self.cross_b = [self.params.add(f"rank.cross{k}.b", np.zeros(width))
                        for k in range(cross_layers)]
        self.tower = []
        prev = width
        for i, w in enumerate(tower):
            self.tower.append(Linear(self.params, f"rank.tower{i}", rng, prev, w))
            prev = w
        self.head = Linear(self.params, "rank.head", rng, width + prev, 1)

    def _project(self, x):
        return self.proj(x) if self.use_proj else x

    def _features(self, hist, hist_mask):
        h = self._project(hist)
        b, l, _ = h.shape
        maskf = hist_mask[:, :, None].astype(np.float64)
        summed = T.tsum(T.rowscale(h, T.constant(maskf)), axis=1)
        counts = hist_mask.sum(axis=1)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)[:, None]
        return T.rowscale(summed, T.constant(inv))

    def logits(self, hist, hist_mask, cand):
        """(B, L, d_in) histories and (B, d_in) candidates -> (B,) logits."""
        mean_hist = self._features(hist, hist_mask)
        c = self._project(cand)
        x0 = T.concat([mean_hist, c], axis=1)
        x = x0
        for w, bias in zip(self.cross_w, self.cross_b):
            x = T.add(T.add(T.rowscale(x0, T.matmul(x, w)), bias), x)
        t = x0
        for layer in self.tower:
            t = T.gelu(layer(t))
        z = self.head(T.concat([x, t], axis=1))
        return T.reshape(z, (z.shape[0],))

    def predict_batch(self, hist, hist_mask, cand):
        return T.sigmoid(self.logits(hist, hist_mask, cand))

    def predict(self, history_vecs, candidate_vec):
        """Convenience single-pair click probability from raw vectors."""
        hist, mask = _single_history(history_vecs, self.d_in)
        cand = np.asarray(candidate_vec, dtype=np.float64).reshape(1, self.d_in)
        return float(self.predict_batch(T.constant(hist), mask, T.constant(cand)).data[0])

    def parameters(self):
        return self.params.all()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def build_source(mode, *, cache=None, news_ids=None, mft_model=None,
                 articles_by_id=None, counter=None, d_model=64, seed=0):
    if mode == NewsSourceMode.FROZEN_CACHE:
        if cache is None:
            raise ValueError("frozen mode requires a representation cache")
        return FrozenCacheSource(cache)
    if mode == NewsSourceMode.ID_EMBEDDING:
        if news_ids is None:
            raise ValueError("id mode requires the corpus news-id list")
        return IdEmbeddingSource(news_ids, d_model, seed=seed)
    if mode == NewsSourceMode.END_TO_END_TEXT:
        if mft_model is None or articles_by_id is None:
            raise ValueError("e2e mode requires an encoder and the tokenized corpus")
        return EndToEndTextSource(mft_model, articles_by_id, counter)
    raise ValueError(f"unknown mode {mode!r}")


def build_model(cfg, source):
    use_proj = cfg.mode != NewsSourceMode.ID_EMBEDDING
    if cfg.model == "matching":
        return MatchingModel(source.dim, cfg.d_model, heads=cfg.heads,
                             use_proj=use_proj, seed=cfg.seed)
    if cfg.model == "ranking":
        return RankingModel(source.dim, cfg.d_model, cross_layers=cfg.cross_layers,
                            tower=tuple(cfg.tower), use_proj=use_proj, seed=cfg.seed)
    raise ValueError(f"unknown downstream model {cfg.model!r}")


def _pad_history(history, max_history):
    hist = list(history[-max_history:])
    pad = max_history - len(hist)
    return hist + [PAD_NEWS_ID] * pad, [True] * len(hist) + [False] * pad


def matching_samples(records, negatives, rng):
    """One sample per (impression, positive): positive first, K negatives."""
    samples = []
    for rec in records:
        pos = [n for n, l in rec.candidates if l == 1]
        neg = [n for n, l in rec.candidates if l == 0]
        if not pos or not neg:
            continue
        for p in pos:
            k = rng.choice(len(neg), size=negatives, replace=len(neg) < negatives)
            samples.append((rec.history, [p] + [neg[i] for i in k]))
    return samples


def ranking_samples(records):
    return [(rec.history, n, l) for rec in records for n, l in rec.candidates]


def _matching_batch_loss(model, source, batch, max_history):
    hists, cands = [], []
    masks = []
    for history, cand_ids in batch:
        ids, mask = _pad_history(history, max_history)
        hists.append(ids)
        masks.append(mask)
        cands.append(cand_ids)
    scores = model.score_batch(source.batch_vectors(hists), np.array(masks, dtype=bool),
                               source.batch_vectors(cands))
    return T.cross_entropy(scores, np.zeros(len(batch), dtype=np.int64))


def _ranking_batch_loss(model, source, batch, max_history):
    hists, masks, cands, labels = [], [], [], []
    for history, cand, label in batch:
        ids, mask = _pad_history(history, max_history)
        hists.append(ids)
        masks.append(mask)
        cands.append([cand])
        labels.append(label)
    cand_vecs = source.batch_vectors(cands)
    b = len(batch)
    logits = model.logits(source.batch_vectors(hists), np.array(masks, dtype=bool),
                          T.reshape(cand_vecs, (b, source.dim)))
    return T.bce_with_logits(logits, np.array(labels, dtype=np.float64))


def score_records(model, source, records, cfg):
    """Per-impression (scores, labels) pairs for evaluation."""
    out = []
    for rec in records:
        ids, mask = _pad_history(rec.history, cfg.max_history)
        cand_ids = [n for n, _ in rec.candidates]
        labels = np.array([l for _, l in rec.candidates])
        if cfg.model == "matching":
            hist = source.batch_vectors([ids])
            cands = source.batch_vectors([cand_ids])
            scores = model.score_batch(hist, np.array([mask], dtype=bool), cands).data[0]
        else:
            # the ranking model consumes one candidate per row, so the
            # history repeats per candidate
            n = len(cand_ids)
            hist = source.batch_vectors([ids] * n)
            cands = T.reshape(source.batch_vectors([[c] for c in cand_ids]), (n, source.dim))
            scores = model.predict_batch(hist, np.array([mask] * n, dtype=bool), cands).data
        out.append((np.array(scores, dtype=np.float64), labels))
    return out


@dataclass
class TrainResult:
    model: object
    source: object
    counter: EncoderCallCounter
    history: list = field(default_factory=list)
    wall_seconds: float = 0.0


def train_downstream(cfg, records, *, cache=None, news_ids=None, mft_model=None,
                     articles_by_id=None, val_records=None, eval_fn=None):
    """Train a downstream model; returns the model, call counters, and log.

    ``eval_fn`` (model, source, records) -> float lets callers plug in AUC
    without a circular import on the metrics module.
    """
    counter = EncoderCallCounter()
    source = build_source(cfg.mode, cache=cache, news_ids=news_ids, mft_model=mft_model,
                          articles_by_id=articles_by_id, counter=counter,
                          d_model=cfg.d_model, seed=cfg.seed)
    model = build_model(cfg, source)
    params = model.parameters() + source.trainable_params()
    optimizer = Adam(params, lr=cfg.lr)
    result = TrainResult(model=model, source=source, counter=counter)
    last_good = {p.name: p.data.copy() for p in params}
    start = time.perf_counter()

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng((cfg.seed, epoch))
        if cfg.model == "matching":
            samples = matching_samples(records, cfg.negatives, rng)
            batch_loss = _matching_batch_loss
        else:
            samples = ranking_samples(records)
            batch_loss = _ranking_batch_loss
        if not samples:
            raise ValueError("no trainable samples in the behavior log")
        order = rng.permutation(len(samples))
        samples = [samples[i] for i in order]
        total, count = 0.0, 0
        epoch_start = time.perf_counter()
        try:
            for i in range(0, len(samples), cfg.batch_size):
                batch = samples[i:i + cfg.batch_size]
                loss = batch_loss(model, source, batch, cfg.max_history)
                T.backward(loss)
                optimizer.step()
                optimizer.zero_grad()
                total += loss.item() * len(batch)
                count += len(batch)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"downstream training diverged in epoch {epoch}: {exc}",
                                   last_good) from exc
        row = {
            "epoch": epoch,
            "loss": total / count,
            "samples": count,
            "cache_build_calls": counter.cache_build_calls,
            "downstream_calls": counter.downstream_calls,
            "wall_clock_s": time.perf_counter() - epoch_start,
        }
        if val_records and eval_fn is not None:
            row["val_auc"] = eval_fn(model, source, val_records)
        result.history.append(row)
        last_good = {p.name: p.data.copy() for p in params}

    result.wall_seconds = time.perf_counter() - start
    return result
