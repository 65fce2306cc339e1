"""Ranking metrics, carbon accounting, and the redundancy profiler.

AUC is reported on the 0-100 scale (the only scale on which the
carbon-efficiency ratio closes numerically); MRR and nDCG@5 live in [0, 1].
"""

import csv
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores shape {scores.shape} vs labels shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary")
    return scores, labels


def _average_ranks(scores):
    """1-based ranks in ascending score order; ties share the mean rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    s = scores[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(scores, labels):
    """Probability that a random positive outscores a random negative,
    ties counted half, scaled to [0, 100]."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc requires at least one positive and one negative label")
    ranks = _average_ranks(scores)
    wins = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return wins / (n_pos * n_neg) * 100.0


def _descending_order(scores):
    # deterministic: by descending score, ties by original index
    return np.lexsort((np.arange(len(scores)), -scores))


def mrr(scores, labels):
    """Mean reciprocal rank over the impression's positives."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("mrr requires at least one positive and one negative label")
    ranked = labels[_descending_order(scores)]
    rr = ranked / np.arange(1, len(ranked) + 1)
    return float(rr.sum() / n_pos)


def ndcg_at_k(scores, labels, k=5):
    """Binary-gain nDCG at cutoff k."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("ndcg requires at least one positive and one negative label")
    ranked = labels[_descending_order(scores)][:k]
    discounts = 1.0 / np.log2(np.arange(2, len(ranked) + 2))
    dcg = float((ranked * discounts).sum())
    ideal = min(k, n_pos)
    idcg = float((1.0 / np.log2(np.arange(2, ideal + 2))).sum())
    return dcg / idcg


@dataclass
class MetricsReport:
    auc: float                 # [0, 100]
    mrr: float                 # [0, 1]
    ndcg5: float               # [0, 1]
    impression_count: int
    skipped_single_class: int = 0

    def to_dict(self):
        return {"auc": self.auc, "mrr": self.mrr, "ndcg5": self.ndcg5,
                "impression_count": self.impression_count,
                "skipped_single_class": self.skipped_single_class}


def aggregate_impressions(pairs):
    """Mean per-impression metrics; single-class impressions are excluded
    from the means and counted."""
    aucs, mrrs, ndcgs, skipped = [], [], [], 0
    for scores, labels in pairs:
        labels = np.asarray(labels)
        if labels.sum() in (0, len(labels)):
            skipped += 1
            continue
        aucs.append(auc(scores, labels))
        mrrs.append(mrr(scores, labels))
        ndcgs.append(ndcg_at_k(scores, labels, k=5))
    if not aucs:
        raise ValueError("no scorable impressions (all single-class)")
    return MetricsReport(float(np.mean(aucs)), float(np.mean(mrrs)), float(np.mean(ndcgs)),
                         len(aucs), skipped)


# ---------------------------------------------------------------------------
# green accounting
# ---------------------------------------------------------------------------

def co2e(p, t, c):
    """Grams of CO2-equivalent: power (kW) x runtime (hours) x grid carbon
    efficiency (g/kWh)."""
    if p < 0 or t < 0 or c < 0:
        raise ValueError("co2e arguments must be non-negative")
    return p * t * c


def apc(auc_value, co2e_grams):
    """AUC points above random per unit carbon, x100."""
    if co2e_grams <= 0:
        raise ValueError("apc is undefined for non-positive carbon emission")
    return (auc_value - 50.0) / co2e_grams * 100.0


@dataclass
class EnergyReport:
    p: float            # kW
    t: float            # hours
    c: float            # g CO2-eq per kWh
    co2e: float         # grams
    apc: float = None   # set when an AUC is available

    def to_dict(self):
        return {"power_kw": self.p, "runtime_hours": self.t,
                "carbon_g_per_kwh": self.c, "co2e_g": self.co2e, "apc": self.apc}


def energy_report(p, t, c, auc_value=None):
    grams = co2e(p, t, c)
    return EnergyReport(p, t, c, grams,
                        apc(auc_value, grams) if auc_value is not None else None)


# ---------------------------------------------------------------------------
# redundancy profiler
# ---------------------------------------------------------------------------

@dataclass
class RedundancyStats:
    counts: dict                        # news_id -> per-epoch appearances
    epoch_mean: float                   # mean appearances per news article
    per_user_mean: float                # mean samples per user
    batch_mean: float                   # mean within-batch appearances
    cdf: list = field(default_factory=list)  # (threshold, % articles <= threshold)

    def to_dict(self):
        return {"epoch_mean": self.epoch_mean, "per_user_mean": self.per_user_mean,
                "batch_mean": self.batch_mean, "distinct_news": len(self.counts),
                "cdf": [{"appearances": int(x), "pct_articles": y} for x, y in self.cdf]}


def profile_redundancy(records, batch_size=64, thresholds=None):
    """Count every news occurrence (history + candidates) across one epoch
    of training samples, plus the same statistic within each batch."""
    records = list(records)
    if not records:
        raise ValueError("profile_redundancy: empty behavior log")
    counts = Counter()
    users = Counter()
    for rec in records:
        users[rec.user_id] += 1
        counts.update(rec.history)
        counts.update(n for n, _ in rec.candidates)
    epoch_mean = sum(counts.values()) / len(counts)
    per_user_mean = sum(users.values()) / len(users)

    batch_means = []
    for i in range(0, len(records), batch_size):
        bc = Counter()
        for rec in records[i:i + batch_size]:
            bc.update(rec.history)
            bc.update(n for n, _ in rec.candidates)
        batch_means.append(sum(bc.values()) / len(bc))
    batch_mean = float(np.mean(batch_means))

    max_count = max(counts.values())
    if thresholds is None:
        xs = sorted(set(counts.values()))
    else:
        xs = sorted(set(int(t) for t in thresholds))
        if not xs or xs[-1] < max_count:
            xs.append(max_count)
    values = np.array(sorted(counts.values()))
    cdf = [(x, float(np.searchsorted(values, x, side="right")) / len(values) * 100.0)
           for x in xs]
    return RedundancyStats(dict(counts), epoch_mean, per_user_mean, batch_mean, cdf)


def write_report(json_path, metrics=None, energy=None, redundancy=None,
                 cdf_csv_path=None, extra=None):
    """Emit the consolidated JSON report and, optionally, the CDF as CSV."""
    doc = {}
    if metrics is not None:
        doc["metrics"] = metrics.to_dict() if hasattr(metrics, "to_dict") else metrics
    if energy is not None:
        doc["energy"] = energy.to_dict() if hasattr(energy, "to_dict") else energy
    if redundancy is not None:
        doc["redundancy"] = redundancy.to_dict() if hasattr(redundancy, "to_dict") else redundancy
    if extra:
        doc.update(extra)
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    if cdf_csv_path is not None and redundancy is not None:
        with open(cdf_csv_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["appearances", "pct_articles"])
            for x, y in redundancy.cdf:
                writer.writerow([x, y])
    return doc
