"""Per-impression ranking metrics and the similarity-drift diagnostic."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .params import ParamVector


@dataclass
class EvalReport:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    impression_count: int
    skipped: int = 0

    def to_json(self, round_index: int) -> dict:
        return {
            "round": int(round_index),
            "auc": self.auc,
            "mrr": self.mrr,
            "ndcg5": self.ndcg5,
            "ndcg10": self.ndcg10,
            "impressions": self.impression_count,
            "skipped": self.skipped,
        }

    def as_dict(self) -> dict:
        return asdict(self)


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in shape")
    return scores, labels


def _ranking(scores):
    # descending score, ties by ascending input index (stable sort)
    return np.argsort(-scores, kind="stable")


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative."""
    scores, labels = _check(scores, labels)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    equal = np.searchsorted(neg_sorted, pos, side="right") - below
    return float((below.sum() + 0.5 * equal.sum()) / (len(pos) * len(neg)))


def mrr(scores, labels) -> float:
    scores, labels = _check(scores, labels)
    if not labels.any():
        raise ValueError("MRR needs at least one positive")
    ranked = labels[_ranking(scores)]
    ranks = np.flatnonzero(ranked) + 1
    return float(np.mean(1.0 / ranks))


def ndcg_at_k(scores, labels, k: int) -> float:
    scores, labels = _check(scores, labels)
    if not labels.any():
        raise ValueError("nDCG needs at least one positive")
    discounts = 1.0 / np.log2(np.arange(2, len(scores) + 2))
    gains = labels[_ranking(scores)].astype(np.float64)
    dcg = np.sum(gains[:k] * discounts[:k])
    ideal = np.sum(discounts[: min(k, int(labels.sum()))])
    return float(dcg / ideal)


def impression_metrics(scores, labels) -> tuple[float, float, float, float]:
    return auc(scores, labels), mrr(scores, labels), ndcg_at_k(scores, labels, 5), ndcg_at_k(scores, labels, 10)


def score_eval_impressions(params, model, corpus):
    """Yield ``(scores, labels)`` for every eval impression."""
    news_reprs = model.encode_corpus(params, corpus)
    index = corpus.index
    users = {}
    order = []
    for uid, _ in corpus.eval_impressions:
        if uid not in users:
            users[uid] = len(order)
            order.append(corpus.history_indices(corpus.client(uid), model.config.max_history_len))
    user_reprs = model.encode_users(params, news_reprs, order)
    for uid, imp in corpus.eval_impressions:
        rows = np.array([index[n] for n in imp.shown], dtype=np.int64)
        yield news_reprs[rows] @ user_reprs[users[uid]], np.asarray(imp.clicks, dtype=bool)


def evaluate_scored(scored) -> EvalReport:
    rows = []
    skipped = 0
    for scores, labels in scored:
        if not labels.any() or labels.all():
            skipped += 1
            continue
        rows.append(impression_metrics(scores, labels))
    if not rows:
        raise ValueError("no evaluable impression (each needs both labels)")
    means = np.mean(np.asarray(rows), axis=0)
    return EvalReport(*(float(x) for x in means), impression_count=len(rows), skipped=skipped)


def evaluate(params, model, corpus) -> EvalReport:
    """Unweighted per-impression means of AUC, MRR, nDCG@5 and nDCG@10."""
    return evaluate_scored(score_eval_impressions(params, model, corpus))


def pearson_r(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson_r needs two equal-length samples of size >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise ValueError("correlation undefined for zero-variance input")
    return float(np.dot(dx, dy) / np.sqrt(sxx * syy))


def sample_news_pairs(n_news: int, n_pairs: int, seed) -> np.ndarray:
    """Distinct unordered row pairs ``(i < j)`` drawn without replacement."""
    total = n_news * (n_news - 1) // 2
    if n_pairs > total:
        raise ValueError(f"only {total} distinct pairs exist, {n_pairs} requested")
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=n_pairs, replace=False))
    i, j = np.triu_indices(n_news, k=1)
    return np.stack([i[flat], j[flat]], axis=1)


def similarity_drift(params_a: ParamVector, params_b: ParamVector, model, corpus,
                     n_pairs: int = 10000, seed=0) -> float:
    """Pearson r of news-pair dot similarities under two checkpoints."""
    n = len(corpus.news)
    pairs = sample_news_pairs(n, min(n_pairs, n * (n - 1) // 2), seed)
    ra = model.encode_corpus(params_a, corpus)
    rb = model.encode_corpus(params_b, corpus)
    sa = np.einsum("pd,pd->p", ra[pairs[:, 0]], ra[pairs[:, 1]])
    sb = np.einsum("pd,pd->p", rb[pairs[:, 0]], rb[pairs[:, 1]])
    return pearson_r(sa, sb)
