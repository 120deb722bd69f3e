"""Reference news recommender with hand-written gradients.

News encoder: additive attention over title word embeddings.
User encoder: additive attention over clicked-news representations.
Click score: dot product. Loss: softmax cross-entropy over one clicked item
and ``P`` sampled non-clicked items.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamVector, SegmentMap


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    attn_hidden: int | None = None
    max_title_len: int = 20
    max_history_len: int = 50
    negatives: int = 4
    # accepted for config compatibility; the reference model never drops out
    dropout: float = 0.0

    def __post_init__(self):
        if self.attn_hidden is None:
            self.attn_hidden = self.embed_dim
        for name in ("vocab_size", "embed_dim", "attn_hidden", "max_title_len",
                     "max_history_len", "negatives"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def attn_pool(X, mask, W, b, q):
    """Additive attention pooling over axis 1 of ``X`` (B, T, d).

    Rows without any valid position pool to the zero vector.
    """
    H = np.tanh(X @ W.T + b)
    s = np.where(mask, H @ q, -np.inf)
    smax = s.max(axis=1, keepdims=True)
    smax = np.where(np.isfinite(smax), smax, 0.0)
    e = np.exp(s - smax) * mask
    z = e.sum(axis=1, keepdims=True)
    alpha = e / np.where(z > 0, z, 1.0)
    out = np.einsum("bt,btd->bd", alpha, X)
    return out, (X, H, alpha)


def attn_pool_backward(cache, d_out, W, q):
    X, H, alpha = cache
    dX = alpha[..., None] * d_out[:, None, :]
    d_alpha = np.einsum("btd,bd->bt", X, d_out)
    d_s = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
    dq = np.einsum("bt,bth->h", d_s, H)
    d_pre = d_s[..., None] * q * (1.0 - H * H)
    dW = np.einsum("bth,btd->hd", d_pre, X)
    db = d_pre.sum(axis=(0, 1))
    dX += d_pre @ W
    return dX, dW, db, dq


def scatter_add(target, index, values):
    """``target[index] += values`` with repeated indices accumulated."""
    if len(index) == 0:
        return
    order = np.argsort(index, kind="stable")
    idx = index[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    target[idx[starts]] += np.add.reduceat(values[order], starts, axis=0)


def click_scores(user, candidates) -> np.ndarray:
    return np.asarray(candidates, dtype=np.float64) @ np.asarray(user, dtype=np.float64)


def ns_softmax_loss(scores, labels):
    """Softmax cross-entropy for one sample; returns ``(loss, probs)``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != scores.shape or np.count_nonzero(labels) != 1 or labels.sum() != 1:
        raise ValueError("labels must be one-hot with exactly one positive")
    shifted = scores - scores.max()
    log_z = np.log(np.exp(shifted).sum())
    log_p = shifted - log_z
    return float(-np.dot(labels, log_p)), np.exp(log_p)


class AttnRec:
    """Attention-pooling recommender over a flat :class:`ParamVector`."""

    def __init__(self, config: ModelConfig):
        self.config = config
        V, d, h = config.vocab_size, config.embed_dim, config.attn_hidden
        self._news_shapes = {"emb": (V, d), "W": (h, d), "b": (h,), "q": (h,)}
        self._user_shapes = {"W": (h, d), "b": (h,), "q": (h,)}
        self.layout = SegmentMap.from_lengths({
            "news_model": sum(int(np.prod(s)) for s in self._news_shapes.values()),
            "user_model": sum(int(np.prod(s)) for s in self._user_shapes.values()),
        })
        self._slots = []
        for seg, shapes in (("news_model", self._news_shapes), ("user_model", self._user_shapes)):
            pos = self.layout.span(seg).start
            slots = []
            for name, shape in shapes.items():
                n = int(np.prod(shape))
                slots.append((name, pos, pos + n, shape))
                pos += n
            self._slots.append(slots)

    @property
    def dim(self) -> int:
        return self.config.embed_dim

    def init_params(self, seed) -> ParamVector:
        rng = np.random.default_rng(seed)
        values = np.empty(self.layout.total_len)
        news, user = self._views(values)
        scale = 1.0 / np.sqrt(self.config.embed_dim)
        news["emb"][...] = rng.uniform(-0.1, 0.1, size=news["emb"].shape)
        for part in (news["W"], news["b"], news["q"], user["W"], user["b"], user["q"]):
            part[...] = rng.uniform(-scale, scale, size=part.shape)
        return ParamVector(values, self.layout)

    def _views(self, values):
        return [{name: values[a:b].reshape(shape) for name, a, b, shape in slots}
                for slots in self._slots]

    def views(self, params):
        """Named, reshaped, writable views: ``(news_parts, user_parts)``."""
        values = params.values if isinstance(params, ParamVector) else params
        return self._views(values)

    # -- news encoder ------------------------------------------------------

    def encode_news(self, params, title_tokens) -> np.ndarray:
        tokens = np.asarray(title_tokens, dtype=np.int64)
        if tokens.size == 0:
            raise ValueError("cannot encode an empty title")
        if tokens.size > self.config.max_title_len:
            raise ValueError(f"title has {tokens.size} tokens, max is {self.config.max_title_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise IndexError("token id outside the vocabulary")
        reprs, _ = self.news_forward(params, tokens[None, :], np.array([tokens.size]))
        return reprs[0]

    def news_forward(self, params, tokens, lengths):
        """Encode a padded batch of titles; returns ``(reprs, cache)``."""
        news, _ = self.views(params)
        tokens = np.asarray(tokens, dtype=np.int64)
        mask = np.arange(tokens.shape[1])[None, :] < np.asarray(lengths)[:, None]
        E = news["emb"][tokens]
        reprs, pool_cache = attn_pool(E, mask, news["W"], news["b"], news["q"])
        return reprs, (tokens, mask, pool_cache)

    def news_backward(self, params, cache, d_reprs, grad=None) -> np.ndarray:
        """Accumulate d(loss)/d(params) given d(loss)/d(reprs) into ``grad``."""
        if grad is None:
            grad = np.zeros(self.layout.total_len)
        news, _ = self.views(params)
        g_news, _ = self._views(grad)
        tokens, mask, pool_cache = cache
        dE, dW, db, dq = attn_pool_backward(pool_cache, d_reprs, news["W"], news["q"])
        g_news["W"] += dW
        g_news["b"] += db
        g_news["q"] += dq
        scatter_add(g_news["emb"], tokens[mask], dE[mask])
        return grad

    def encode_corpus(self, params, corpus, rows=None) -> np.ndarray:
        tokens, lengths = corpus.token_matrix()
        if rows is not None:
            tokens, lengths = tokens[rows], lengths[rows]
        reprs, _ = self.news_forward(params, tokens, lengths)
        return reprs

    # -- user encoder ------------------------------------------------------

    def encode_user(self, params, history) -> np.ndarray:
        history = np.asarray(history, dtype=np.float64).reshape(-1, self.dim)
        if len(history) > self.config.max_history_len:
            raise ValueError(f"history has {len(history)} items, max is {self.config.max_history_len}")
        if len(history) == 0:
            return np.zeros(self.dim)
        out, _ = self.user_forward(params, history[None], np.ones((1, len(history)), dtype=bool))
        return out[0]

    def user_forward(self, params, history_reprs, mask):
        _, user = self.views(params)
        return attn_pool(history_reprs, mask, user["W"], user["b"], user["q"])

    def encode_users(self, params, news_reprs, histories) -> np.ndarray:
        """User vectors for a list of history row-index arrays."""
        S = max((len(h) for h in histories), default=0)
        if S == 0:
            return np.zeros((len(histories), self.dim))
        pos = np.zeros((len(histories), S), dtype=np.int64)
        mask = np.zeros((len(histories), S), dtype=bool)
        for i, h in enumerate(histories):
            pos[i, : len(h)] = h
            mask[i, : len(h)] = True
        users, _ = self.user_forward(params, news_reprs[pos], mask)
        return users

    # -- training objective ------------------------------------------------

    def client_loss_and_grad(self, params, samples, corpus):
        """Mean sample loss and its gradient over the full parameter vector."""
        if not samples:
            raise ValueError("client_loss_and_grad needs at least one sample")
        values = params.values if isinstance(params, ParamVector) else params
        B = len(samples)

        # samples of one client usually share a history; encode each once
        hist_keys = {}
        hist_of = np.empty(B, dtype=np.int64)
        for i, s in enumerate(samples):
            key = s.history.tobytes()
            if key not in hist_keys:
                hist_keys[key] = (len(hist_keys), s.history)
            hist_of[i] = hist_keys[key][0]
        histories = [h for _, h in hist_keys.values()]

        cands = np.stack([s.candidates for s in samples])
        labels = np.stack([s.labels for s in samples])
        rows = np.unique(np.concatenate([cands.ravel()] + histories))
        cand_pos = np.searchsorted(rows, cands)

        tokens, lengths = corpus.token_matrix()
        news_reprs, news_cache = self.news_forward(values, tokens[rows], lengths[rows])

        S = max(len(h) for h in histories)
        hist_pos = np.zeros((len(histories), max(S, 1)), dtype=np.int64)
        hist_mask = np.zeros_like(hist_pos, dtype=bool)
        for j, h in enumerate(histories):
            hist_pos[j, : len(h)] = np.searchsorted(rows, h)
            hist_mask[j, : len(h)] = True
        users_u, user_cache = self.user_forward(values, news_reprs[hist_pos], hist_mask)
        users = users_u[hist_of]

        C = news_reprs[cand_pos]
        scores = np.einsum("bcd,bd->bc", C, users)
        shifted = scores - scores.max(axis=1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-np.sum(labels * log_p) / B)

        d_scores = (np.exp(log_p) - labels) / B
        d_users = np.zeros_like(users_u)
        np.add.at(d_users, hist_of, np.einsum("bc,bcd->bd", d_scores, C))
        d_C = d_scores[..., None] * users[:, None, :]

        grad = np.zeros(self.layout.total_len)
        _, user = self._views(values)
        _, g_user = self._views(grad)
        d_hist, dW, db, dq = attn_pool_backward(user_cache, d_users, user["W"], user["q"])
        g_user["W"] += dW
        g_user["b"] += db
        g_user["q"] += dq

        d_news = np.zeros_like(news_reprs)
        scatter_add(d_news, cand_pos.ravel(), d_C.reshape(-1, d_C.shape[-1]))
        scatter_add(d_news, hist_pos[hist_mask], d_hist[hist_mask])
        self.news_backward(values, news_cache, d_news, grad)
        return loss, grad
