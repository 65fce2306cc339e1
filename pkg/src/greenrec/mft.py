"""Multi-field transformer news encoder and its two pretraining tasks.

An article's three token fields are assembled into one sequence
``[CLS, title..., SEP, category..., SEP, abstract..., SEP]`` whose full
length is title_len + category_len + abstract_len + 4. Input embeddings sum
token, position, and field-segment tables; a stack of post-norm transformer
layers refines them; the news vector is the mean over non-PAD positions.

Two self-supervised losses train the encoder: masked token prediction
(MTP, recover masked field tokens over the vocabulary) and field alignment
(FA, classify whether one field was swapped in from another article). Both
sum per sequence and average over the batch; the total loss is their sum.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import CLS_ID, MASK_ID, PAD_ID, SEP_ID, NewsArticle
from .nn import Linear, LayerNorm, MultiHeadSelfAttention, ParamSet, embedding_init
from .optim import Adam
from .tensor import NonFiniteError

# Field-segment labels.
FIELD_SPECIAL, FIELD_TITLE, FIELD_CATEGORY, FIELD_ABSTRACT = 0, 1, 2, 3
N_FIELD_SEGMENTS = 4
_FIELD_LABELS = (FIELD_TITLE, FIELD_CATEGORY, FIELD_ABSTRACT)


@dataclass(frozen=True)
class MftConfig:
    d: int = 64
    layers: int = 3
    heads: int = 4
    title_len: int = 20
    category_len: int = 1
    abstract_len: int = 40
    mask_ratio: float = 0.15
    fa_negative_ratio: float = 0.5

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if not 0.0 <= self.fa_negative_ratio <= 1.0:
            raise ValueError(f"fa_negative_ratio must be in [0, 1], got {self.fa_negative_ratio}")
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if min(self.title_len, self.category_len, self.abstract_len) < 1:
            raise ValueError("per-field max lengths must be >= 1")

    @property
    def max_len(self):
        # CLS plus one SEP per field.
        return self.title_len + self.category_len + self.abstract_len + 4


@dataclass(frozen=True)
class AssembledSequence:
    token_ids: np.ndarray      # (m,) int64, PAD-padded
    field_ids: np.ndarray      # (m,) int64 segment labels
    positions: np.ndarray      # (m,) int64, 0..m-1
    attention_mask: np.ndarray  # (m,) bool, False at PAD
    length: int                # effective length before padding


def assemble(article, cfg, pad_to=None):
    """Lay out one article as [CLS, t..., SEP, c..., SEP, a..., SEP] + PAD."""
    fields = article.fields()
    limits = (cfg.title_len, cfg.category_len, cfg.abstract_len)
    for seq, limit, name in zip(fields, limits, ("title", "category", "abstract")):
        if len(seq) > limit:
            raise ValueError(f"{article.news_id}: {name} length {len(seq)} exceeds limit {limit}")
    ids = [CLS_ID]
    labels = [FIELD_SPECIAL]
    for seq, label in zip(fields, _FIELD_LABELS):
        ids.extend(seq)
        labels.extend([label] * len(seq))
        ids.append(SEP_ID)
        labels.append(label)
    length = len(ids)
    m = cfg.max_len if pad_to is None else pad_to
    if length > m:
        raise ValueError(f"{article.news_id}: assembled length {length} exceeds {m}")
    pad = m - length
    token_ids = np.array(ids + [PAD_ID] * pad, dtype=np.int64)
    field_ids = np.array(labels + [FIELD_SPECIAL] * pad, dtype=np.int64)
    mask = np.zeros(m, dtype=bool)
    mask[:length] = True
    return AssembledSequence(token_ids, field_ids, np.arange(m, dtype=np.int64), mask, length)


def assemble_batch(articles, cfg, pad_to=None):
    seqs = [assemble(a, cfg, pad_to=pad_to) for a in articles]
    return (
        np.stack([s.token_ids for s in seqs]),
        np.stack([s.field_ids for s in seqs]),
        np.stack([s.attention_mask for s in seqs]),
    )


class MftModel:
    """The encoder stack plus the MTP and FA task heads."""

    def __init__(self, cfg, vocab_size, seed=0):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        p = self.params
        self.token_emb = p.add("mft.token_emb", embedding_init(rng, vocab_size, cfg.d))
        self.pos_emb = p.add("mft.pos_emb", embedding_init(rng, cfg.max_len, cfg.d))
        self.field_emb = p.add("mft.field_emb", embedding_init(rng, N_FIELD_SEGMENTS, cfg.d))
        self.emb_ln = LayerNorm(p, "mft.emb_ln", cfg.d)
        self.layers = []
        for i in range(cfg.layers):
            pre = f"mft.layer{i}"
            self.layers.append({
                "attn": MultiHeadSelfAttention(p, f"{pre}.attn", rng, cfg.d, cfg.heads),
                "ln1": LayerNorm(p, f"{pre}.ln1", cfg.d),
                "ff1": Linear(p, f"{pre}.ff1", rng, cfg.d, 4 * cfg.d),
                "ff2": Linear(p, f"{pre}.ff2", rng, 4 * cfg.d, cfg.d),
                "ln2": LayerNorm(p, f"{pre}.ln2", cfg.d),
            })
        self.mtp_head = Linear(p, "mft.head_mtp", rng, cfg.d, vocab_size)
        self.fa_head = Linear(p, "mft.head_fa", rng, cfg.d, 2)
        # task heads start at zero so untrained losses sit at the uniform
        # baselines ln(N) and ln(2)
        self.mtp_head.w.data[:] = 0.0
        self.fa_head.w.data[:] = 0.0

    # ------------------------------------------------------------------
    def final_states(self, token_ids, field_ids, mask):
        """Run the stack; returns contextual states of shape (B, m, d)."""
        b, m = token_ids.shape
        x = T.add(
            T.add(T.embedding_lookup(self.token_emb, token_ids),
                  T.embedding_lookup(self.pos_emb, np.broadcast_to(np.arange(m), (b, m)))),
            T.embedding_lookup(self.field_emb, field_ids),
        )
        x = self.emb_ln(x)
        for layer in self.layers:
            x = layer["ln1"](T.add(x, layer["attn"](x, mask)))
            ff = layer["ff2"](T.gelu(layer["ff1"](x)))
            x = layer["ln2"](T.add(x, ff))
        return x

    def encode(self, articles, counter=None, role="downstream", pad_to=None):
        """Encode a batch of articles into (B, d) news vectors."""
        token_ids, field_ids, mask = assemble_batch(articles, self.cfg, pad_to=pad_to)
        if counter is not None:
            counter.add(role, len(articles))
        return self._pool(self.final_states(token_ids, field_ids, mask), mask)

    def _pool(self, states, mask):
        b, m, d = states.shape
        maskf = np.broadcast_to(mask[:, :, None], (b, m, 1)).astype(np.float64)
        summed = T.tsum(T.rowscale(states, T.constant(maskf)), axis=1)
        inv = np.broadcast_to(1.0 / mask.sum(axis=1)[:, None], (b, 1)).copy()
        return T.rowscale(summed, T.constant(inv))

    def cls_states(self, states):
        """Extract the position-0 (CLS) embedding of each sequence."""
        b, m, d = states.shape
        flat = T.reshape(states, (b * m, d))
        return T.take_rows(flat, np.arange(b) * m)

    def parameters(self):
        return self.params.all()


def _maskable_positions(token_ids):
    """Field-token positions: anything that is not PAD, CLS, or SEP."""
    return ~np.isin(token_ids, (PAD_ID, CLS_ID, SEP_ID))


def mtp_loss(model, articles, rng):
    """Masked-token-prediction loss over a batch of articles.

    Per sequence, ceil(mask_ratio * maskable) positions are replaced with
    MASK; the loss sums each sequence's token NLL and averages over the
    batch. Sequences with no maskable tokens contribute zero with a warning.
    """
    if not articles:
        raise ValueError("mtp_loss: empty batch")
    cfg = model.cfg
    token_ids, field_ids, mask = assemble_batch(articles, cfg)
    b, m = token_ids.shape
    masked_ids = token_ids.copy()
    rows, cols, targets = [], [], []
    for i in range(b):
        cand = np.flatnonzero(_maskable_positions(token_ids[i]))
        if cand.size == 0:
            warnings.warn(f"article {articles[i].news_id} has no maskable tokens; contributes 0 to MTP")
            continue
        k = math.ceil(cfg.mask_ratio * cand.size)
        chosen = rng.choice(cand, size=k, replace=False)
        rows.extend([i] * k)
        cols.extend(chosen.tolist())
        targets.extend(token_ids[i, chosen].tolist())
        masked_ids[i, chosen] = MASK_ID
    if not rows:
        return T.constant(0.0)
    states = model.final_states(masked_ids, field_ids, mask)
    flat = T.reshape(states, (b * m, cfg.d))
    picked = T.take_rows(flat, np.array(rows) * m + np.array(cols))
    logits = model.mtp_head(picked)
    return T.mul(T.cross_entropy(logits, np.array(targets), reduction="sum"), 1.0 / b)


def _swap_field(article, source, field_index):
    fields = list(article.fields())
    fields[field_index] = source.fields()[field_index]
    return NewsArticle(article.news_id, *fields)


def draw_fa_batch(articles, negative_ratio, rng):
    """Draw field-alignment inputs and labels for one batch.

    Each article independently becomes a negative with probability
    ``negative_ratio``; a negative has one field replaced by the same field
    of another batch article. Swaps that would leave the article
    token-identical are retried across sources and fields; an article
    identical to every other one is relabeled positive (a fully identical
    batch is an error).
    """
    if len(articles) < 2:
        raise ValueError("field alignment needs a batch of at least 2 articles")
    inputs, labels = [], []
    for i, art in enumerate(articles):
        if rng.random() >= negative_ratio:
            inputs.append(art)
            labels.append(1)
            continue
        swapped = None
        for f in rng.permutation(3):
            others = [j for j in rng.permutation(len(articles)) if j != i]
            for j in others:
                if articles[j].fields()[f] != art.fields()[f]:
                    swapped = _swap_field(art, articles[j], f)
                    break
            if swapped is not None:
                break
        if swapped is None:
            if all(a.fields() == articles[0].fields() for a in articles):
                raise ValueError("fa_loss: batch of identical articles, cannot form negatives")
            inputs.append(art)
            labels.append(1)
        else:
            inputs.append(swapped)
            labels.append(0)
    return inputs, labels


def fa_loss(model, articles, rng):
    """Field-alignment loss and batch accuracy over CLS embeddings."""
    inputs, labels = draw_fa_batch(articles, model.cfg.fa_negative_ratio, rng)
    token_ids, field_ids, mask = assemble_batch(inputs, model.cfg)
    states = model.final_states(token_ids, field_ids, mask)
    logits = model.fa_head(model.cls_states(states))
    labels = np.array(labels)
    loss = T.mul(T.cross_entropy(logits, labels, reduction="sum"), 1.0 / len(inputs))
    accuracy = float((logits.data.argmax(axis=1) == labels).mean())
    return loss, accuracy


class TrainingDiverged(RuntimeError):
    """Training hit non-finite values; carries the last good parameters."""

    def __init__(self, message, last_good):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 5e-4
    seed: int = 0
    val_fraction: float = 0.2


@dataclass
class PretrainResult:
    history: list = field(default_factory=list)
    train_size: int = 0
    val_size: int = 0


def _batches(items, batch_size):
    """Consecutive chunks; a trailing singleton merges into the previous
    batch so field alignment always sees at least two articles."""
    out = [items[i:i + batch_size] for i in range(0, len(items), batch_size)]
    if len(out) >= 2 and len(out[-1]) == 1:
        out[-2] = out[-2] + out.pop()
    return out


def _epoch_losses(model, batches, seed, epoch, train, optimizer):
    mtp_total, fa_total, acc_total, n = 0.0, 0.0, 0.0, 0
    for bidx, batch in enumerate(batches):
        rng_mtp = np.random.default_rng((seed, epoch, bidx, 0))
        rng_fa = np.random.default_rng((seed, epoch, bidx, 1))
        l_mtp = mtp_loss(model, batch, rng_mtp)
        if len(batch) >= 2:
            l_fa, acc = fa_loss(model, batch, rng_fa)
            loss = T.add(l_mtp, l_fa)
        else:
            l_fa, acc = T.constant(0.0), 1.0
            loss = l_mtp
        if train:
            T.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
        mtp_total += l_mtp.item() * len(batch)
        fa_total += l_fa.item() * len(batch)
        acc_total += acc * len(batch)
        n += len(batch)
    return mtp_total / n, fa_total / n, acc_total / n, n


def pretrain(model, articles, cfg):
    """Minimize MTP + FA by Adam over an 80/20 train/validation split.

    Every training article is visited exactly once per epoch. A non-finite
    loss aborts with the parameters captured at the last completed epoch.
    """
    if not articles:
        raise ValueError("pretrain: empty corpus")
    articles = list(articles)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(articles))
    n_val = int(round(cfg.val_fraction * len(articles)))
    val = [articles[i] for i in order[:n_val]]
    train = [articles[i] for i in order[n_val:]]
    if not train:
        raise ValueError("pretrain: train split is empty; corpus too small")

    optimizer = Adam(model.parameters(), lr=cfg.lr)
    result = PretrainResult(train_size=len(train), val_size=len(val))
    last_good = {k: v.copy() for k, v in model.params.arrays().items()}
    for epoch in range(cfg.epochs):
        epoch_rng = np.random.default_rng((cfg.seed, epoch))
        shuffled = [train[i] for i in epoch_rng.permutation(len(train))]
        batches = _batches(shuffled, cfg.batch_size)
        try:
            tr_mtp, tr_fa, tr_acc, visits = _epoch_losses(
                model, batches, cfg.seed, epoch, True, optimizer)
            row = {
                "epoch": epoch,
                "train_mtp": tr_mtp, "train_fa": tr_fa,
                "train_loss": tr_mtp + tr_fa, "train_fa_accuracy": tr_acc,
                "articles_visited": visits,
            }
            if val:
                va_mtp, va_fa, va_acc, _ = _epoch_losses(
                    model, _batches(val, cfg.batch_size), cfg.seed + 1, epoch, False, None)
                row.update({"val_mtp": va_mtp, "val_fa": va_fa,
                            "val_loss": va_mtp + va_fa, "val_fa_accuracy": va_acc})
        except NonFiniteError as exc:
            raise TrainingDiverged(f"pretraining diverged in epoch {epoch}: {exc}", last_good) from exc
        result.history.append(row)
        last_good = {k: v.copy() for k, v in model.params.arrays().items()}
    return result
