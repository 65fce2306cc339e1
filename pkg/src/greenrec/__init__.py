"""Encode-once news recommendation with green accounting.

The pipeline has two decoupled stages: a multi-field transformer is
pretrained on news content with two self-supervised tasks, then frozen and
used to encode every article exactly once into a representation cache;
downstream matching and ranking models train against the cache and are
evaluated with ranking metrics plus carbon-emission accounting.
"""

from .corpus import (
    FieldLimits,
    ImpressionRecord,
    NewsArticle,
    Vocabulary,
    build_vocabulary,
    load_behaviors,
    load_news,
    tokenize_corpus,
    tokenize_news,
)
from .evalgreen import (
    EnergyReport,
    MetricsReport,
    RedundancyStats,
    aggregate_impressions,
    apc,
    auc,
    co2e,
    mrr,
    ndcg_at_k,
    profile_redundancy,
)
from .mft import AssembledSequence, MftConfig, MftModel, assemble, fa_loss, mtp_loss, pretrain
from .optim import Adam
from .recsys import (
    DownstreamConfig,
    MatchingModel,
    NewsSourceMode,
    RankingModel,
    train_downstream,
)
from .repstore import (
    EncoderCallCounter,
    RepresentationCache,
    build_cache,
    load_cache,
    lookup,
    save_cache,
)
from .tensor import Parameter, Tensor, backward, constant

__all__ = [
    "Adam", "AssembledSequence", "DownstreamConfig", "EncoderCallCounter",
    "EnergyReport", "FieldLimits", "ImpressionRecord", "MatchingModel",
    "MetricsReport", "MftConfig", "MftModel", "NewsArticle", "NewsSourceMode",
    "Parameter", "RankingModel", "RedundancyStats", "RepresentationCache",
    "Tensor", "Vocabulary", "aggregate_impressions", "apc", "assemble", "auc",
    "backward", "build_cache", "build_vocabulary", "co2e", "constant",
    "fa_loss", "load_behaviors", "load_cache", "load_news", "lookup", "mrr",
    "mtp_loss", "ndcg_at_k", "pretrain", "profile_redundancy", "save_cache",
    "tokenize_corpus", "tokenize_news", "train_downstream",
]

__version__ = "0.1.0"
