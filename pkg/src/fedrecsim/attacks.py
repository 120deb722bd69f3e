"""Poisoning attacks run by colluding malicious clients.

Model-poisoning attacks (UA-FedRec, Gaussian, LIE, Fang) build updates from
statistics of benign updates that the malicious clients compute on their own
local data. Data-poisoning attacks (LF, Pop, FedAttack) rewrite a malicious
client's training samples and then train honestly on them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .data import TrainSample
from .defenses import default_f, multi_krum_order
from .fedcore import ConfigError, train_on_samples
from .params import ModelUpdate, ParamVector, l2_norm

log = logging.getLogger(__name__)

ATTACK_NAMES = ("none", "ua_fedrec", "lf", "pop", "fedattack", "gaussian", "lie", "fang")


@dataclass
class AttackConfig:
    name: str = "ua_fedrec"
    lambda1: float = 3.0
    lambda2: float = 3.0
    lambda3: float = 3.0
    neighbor_refresh_k: int = 100
    known_news_ratio: float = 1.0
    malicious_count: int = 10
    collude: bool = True
    # step size on the news-similarity gradient; None means the client rate
    eta: float | None = None
    jitter: float = 0.0
    z_override: float | None = None
    fang_local_defense: str = "multi_krum"

    def validate(self) -> None:
        if self.name not in ATTACK_NAMES:
            raise ConfigError(f"unknown attack {self.name!r}; valid: {', '.join(ATTACK_NAMES)}")
        if not 0 <= self.lambda1 <= 4:
            raise ConfigError("lambda1 must lie in [0, 4]")
        if self.lambda2 < 0:
            raise ConfigError("lambda2 must be >= 0")
        if not 0 <= self.lambda3 <= 4:
            raise ConfigError("lambda3 must lie in [0, 4]")
        if self.neighbor_refresh_k < 1:
            raise ConfigError("neighbor_refresh_k must be >= 1")
        if not 0 < self.known_news_ratio <= 1:
            raise ConfigError("known_news_ratio must lie in (0, 1]")
        if self.malicious_count < 1:
            raise ConfigError("malicious_count must be >= 1")
        if self.eta is not None and self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.fang_local_defense not in ("multi_krum", "none"):
            raise ConfigError("fang_local_defense must be multi_krum or none")


@dataclass
class BenignStats:
    mu: np.ndarray
    sigma: np.ndarray
    norm_mu: float
    norm_sigma: float
    size_mu: float
    size_sigma: float
    updates: list = field(default_factory=list, repr=False)


def estimate_benign_stats(updates, layout) -> BenignStats:
    """Mean and population std of benign updates, news-segment norms and sizes."""
    if len(updates) == 0:
        raise ConfigError("benign statistics need at least one malicious client")
    U = np.stack([u.delta for u in updates])
    news = layout.span("news_model")
    norms = np.array([l2_norm(u.delta[news]) for u in updates])
    sizes = np.array([u.sample_size for u in updates], dtype=np.float64)
    return BenignStats(U.mean(axis=0), U.std(axis=0), float(norms.mean()), float(norms.std()),
                       float(sizes.mean()), float(sizes.std()), list(updates))


def user_perturb(mu_u, sigma_u, lambda1: float) -> np.ndarray:
    """Push each user-model coordinate against the benign mean direction."""
    mu_u = np.asarray(mu_u, dtype=np.float64)
    return mu_u - lambda1 * np.sign(mu_u) * np.asarray(sigma_u, dtype=np.float64)


def clip_news_update(g_n, norm_mu: float, norm_sigma: float, lambda2: float) -> np.ndarray:
    g_n = np.asarray(g_n, dtype=np.float64)
    bound = norm_mu + lambda2 * norm_sigma
    if not bound > 0:
        log.warning("news update bound %.3g is not positive; submitting a zero news update", bound)
        return np.zeros_like(g_n)
    return g_n / max(1.0, l2_norm(g_n) / bound)


def quantity_perturb(size_mu: float, size_sigma: float, lambda3: float) -> int:
    return max(1, int(math.floor(size_mu + lambda3 * size_sigma)))


# -- news similarity perturbation ----------------------------------------------


@dataclass
class NeighborTable:
    """Nearest and farthest neighbour (corpus rows) of every known news row."""

    rows: np.ndarray
    nearest: np.ndarray
    farthest: np.ndarray
    built_at_round: int


def neighbor_indices(reprs) -> tuple[np.ndarray, np.ndarray]:
    """Local indices of the max- and min-dot-product partner of each row."""
    R = np.asarray(reprs, dtype=np.float64)
    if len(R) < 2:
        raise ConfigError("neighbor search needs at least two news items")
    G = R @ R.T
    np.fill_diagonal(G, -np.inf)
    nearest = np.argmax(G, axis=1)
    np.fill_diagonal(G, np.inf)
    farthest = np.argmin(G, axis=1)
    return nearest, farthest


def select_news_neighbors(reprs, rows, round_index: int) -> NeighborTable:
    rows = np.asarray(rows, dtype=np.int64)
    nearest, farthest = neighbor_indices(reprs)
    return NeighborTable(rows, rows[nearest], rows[farthest], round_index)


class NeighborCache:
    """Rebuilds the neighbor table only once every ``k`` rounds."""

    def __init__(self, k: int):
        self.k = k
        self.table: NeighborTable | None = None
        self.rebuilds = 0

    def get(self, round_index: int, build) -> NeighborTable:
        if self.table is None or round_index - self.table.built_at_round >= self.k:
            self.table = build(round_index)
            self.rebuilds += 1
        return self.table


def news_similarity_loss_grad(params, table: NeighborTable, model, corpus):
    """Loss pulling each news item toward its farthest and away from its
    nearest neighbour, with its gradient over the full parameter vector."""
    values = params.values if isinstance(params, ParamVector) else params
    rows = table.rows
    pos = {int(r): i for i, r in enumerate(rows)}
    near = np.array([pos[int(r)] for r in table.nearest], dtype=np.int64)
    far = np.array([pos[int(r)] for r in table.farthest], dtype=np.int64)
    tokens, lengths = corpus.token_matrix()
    R, cache = model.news_forward(values, tokens[rows], lengths[rows])
    diff_f = R - R[far]
    diff_n = R - R[near]
    loss = float(np.sum(diff_f * diff_f) - np.sum(diff_n * diff_n))
    dR = 2.0 * (diff_f - diff_n)
    np.add.at(dR, far, -2.0 * diff_f)
    np.add.at(dR, near, 2.0 * diff_n)
    grad = model.news_backward(values, cache, dR)
    return loss, grad


def news_similarity_grad(params, table, model, corpus, eta: float) -> np.ndarray:
    """Descent step ``-eta * grad`` of the news-similarity loss; user part zero."""
    _, grad = news_similarity_loss_grad(params, table, model, corpus)
    step = -eta * grad
    step[model.layout.span("user_model")] = 0.0
    return step


def compose_ua_fedrec(params, stats: BenignStats, table: NeighborTable, cfg: AttackConfig,
                      model, corpus, eta: float) -> ModelUpdate:
    layout = params.layout
    news, user = layout.span("news_model"), layout.span("user_model")
    delta = np.zeros(layout.total_len)
    g_n = news_similarity_grad(params, table, model, corpus, eta)
    delta[news] = clip_news_update(g_n[news], stats.norm_mu, stats.norm_sigma, cfg.lambda2)
    delta[user] = user_perturb(stats.mu[user], stats.sigma[user], cfg.lambda1)
    return ModelUpdate(delta, quantity_perturb(stats.size_mu, stats.size_sigma, cfg.lambda3))


# -- baseline transforms ----------------------------------------------------------


def baseline_lf(samples):
    """Move the click to the lowest-index non-clicked slot of each slate."""
    out = []
    for s in samples:
        labels = np.zeros_like(s.labels)
        pos = s.positive
        labels[0 if pos != 0 else 1] = 1.0
        out.append(TrainSample(s.history, s.candidates, labels))
    return out


def cold_news(click_counts, rng, fraction: float = 0.1) -> np.ndarray:
    """Rows in the least-clicked ``fraction``, ties broken by a seeded shuffle."""
    counts = np.asarray(click_counts)
    n_cold = max(1, int(math.ceil(fraction * len(counts))))
    perm = rng.permutation(len(counts))
    order = perm[np.argsort(counts[perm], kind="stable")]
    return np.sort(order[:n_cold])


def baseline_pop(samples, cold_rows, rng):
    """Replace every clicked candidate by a uniformly drawn cold news row."""
    out = []
    for s in samples:
        cands = s.candidates.copy()
        cands[s.positive] = cold_rows[rng.integers(len(cold_rows))]
        out.append(TrainSample(s.history, cands, s.labels.copy()))
    return out


def baseline_fedattack(user_repr, samples, known_rows, known_reprs, P: int):
    """Swap negatives for the known news most similar to the user."""
    ranking = np.argsort(-(np.asarray(known_reprs) @ user_repr), kind="stable")
    ranked_rows = np.asarray(known_rows)[ranking]
    out = []
    for s in samples:
        pos_row = s.candidates[s.positive]
        negs = ranked_rows[ranked_rows != pos_row][:P]
        if len(negs) < P:
            raise ConfigError(f"FedAttack needs at least {P} known news besides the positive")
        out.append(TrainSample(s.history, np.concatenate([[pos_row], negs]), np.eye(P + 1)[0]))
    return out


def baseline_gaussian(stats: BenignStats, rng) -> ModelUpdate:
    delta = rng.normal(stats.mu, stats.sigma)
    return ModelUpdate(delta, max(1, int(math.floor(stats.size_mu))))


def lie_z(n: int, m: int) -> float:
    s = math.floor(n / 2 + 1) - m
    p = 1 - s / (n - m)
    p = min(max(p, 1e-6), 1 - 1e-6)
    return NormalDist().inv_cdf(p)


def baseline_lie(stats: BenignStats, n: int, m: int, z_override: float | None = None) -> ModelUpdate:
    z = lie_z(n, m) if z_override is None else z_override
    return ModelUpdate(stats.mu - z * stats.sigma, max(1, int(math.floor(stats.size_mu))))


def fang_survives(gamma: float, base: np.ndarray, direction: np.ndarray, benign: np.ndarray,
                  D_benign: np.ndarray) -> bool:
    """Does ``base - gamma * direction`` get picked by Multi-Krum among ``benign``?"""
    g = base - gamma * direction
    d_g = np.sum((benign - g) ** 2, axis=1)
    n = len(benign) + 1
    D = np.empty((n, n))
    D[:-1, :-1] = D_benign
    D[-1, :-1] = d_g
    D[:-1, -1] = d_g
    D[-1, -1] = 0.0
    f = default_f(n)
    chosen = multi_krum_order(D, f, n - f - 2, stop_at=n - 1)
    return chosen[-1] == n - 1


def fang_gamma(stats: BenignStats, local_defense: str = "multi_krum", gamma_max: float = 10.0,
               iterations: int = 20, eps: float = 1e-6) -> float:
    """Largest ``gamma`` in [0, gamma_max] whose update survives local Multi-Krum."""
    direction = np.sign(stats.mu) * np.maximum(stats.sigma, eps)
    benign = np.stack([u.delta for u in stats.updates]) if stats.updates else np.empty((0, len(stats.mu)))
    f = default_f(len(benign) + 1)
    if local_defense == "none" or len(benign) + 1 < f + 3:
        return gamma_max
    D_benign = np.empty((len(benign), len(benign)))
    for i in range(len(benign)):
        D_benign[i] = np.sum((benign - benign[i]) ** 2, axis=1)

    def ok(gamma):
        return fang_survives(gamma, stats.mu, direction, benign, D_benign)

    if ok(gamma_max):
        return gamma_max
    if not ok(0.0):
        return 0.0
    lo, hi = 0.0, gamma_max
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


def baseline_fang(stats: BenignStats, local_defense: str = "multi_krum", eps: float = 1e-6) -> ModelUpdate:
    gamma = fang_gamma(stats, local_defense, eps=eps)
    delta = stats.mu - gamma * np.sign(stats.mu) * np.maximum(stats.sigma, eps)
    return ModelUpdate(delta, max(1, int(math.floor(stats.size_mu))), {"gamma": gamma})


# -- attack plans invoked by the round loop -------------------------------------


class AttackPlan:
    """Produces the updates of the malicious clients sampled in a round."""

    def __init__(self, cfg: AttackConfig):
        cfg.validate()
        if cfg.name == "none":
            raise ConfigError("attack 'none' has no plan")
        self.cfg = cfg
        self.malicious_count = cfg.malicious_count
        self.neighbors = NeighborCache(cfg.neighbor_refresh_k)
        self._known_rows = None
        self._cold_rows = None
        self.last_stats: BenignStats | None = None
        self.history = []

    def known_rows(self, ctx) -> np.ndarray:
        """Seeded subset of ``ceil(ratio * L)`` news rows the attacker knows."""
        if self._known_rows is None:
            L = len(ctx.corpus.news)
            n = min(L, int(math.ceil(self.cfg.known_news_ratio * L)))
            rng = ctx.attack_rng(0, 0)
            self._known_rows = np.sort(rng.choice(L, size=n, replace=False))
        return self._known_rows

    def benign_stats(self, round_index, params, ctx) -> BenignStats:
        updates = [ctx.benign_update(params, c, round_index) for c in range(self.malicious_count)]
        updates = [u for u in updates if u.sample_size > 0]
        stats = estimate_benign_stats(updates, params.layout)
        self.last_stats = stats
        return stats

    def submit(self, round_index, params, malicious, ctx, n_round):
        name = self.cfg.name
        if name in ("lf", "pop", "fedattack"):
            return {c: self._data_poison(round_index, params, c, ctx) for c in malicious}

        stats = self.benign_stats(round_index, params, ctx)
        entry = {"round": round_index, "size_mu": stats.size_mu, "size_sigma": stats.size_sigma}
        if name == "ua_fedrec":
            eta = self.cfg.eta if self.cfg.eta is not None else ctx.cfg.learning_rate

            def build(r):
                rows = self.known_rows(ctx)
                reprs = ctx.model.encode_corpus(params, ctx.corpus, rows)
                return select_news_neighbors(reprs, rows, r)

            table = self.neighbors.get(round_index, build)
            shared = compose_ua_fedrec(params, stats, table, self.cfg, ctx.model, ctx.corpus, eta)
            out = {}
            for c in malicious:
                upd = ModelUpdate(shared.delta.copy(), shared.sample_size)
                if self.cfg.jitter > 0:
                    rng = ctx.attack_rng(round_index, c + 1)
                    upd.delta += rng.normal(0.0, self.cfg.jitter, size=upd.delta.shape)
                out[c] = upd
            entry["reported_size"] = shared.sample_size
        elif name == "gaussian":
            out = {c: baseline_gaussian(stats, ctx.attack_rng(round_index, c + 1)) for c in malicious}
        elif name == "lie":
            upd = baseline_lie(stats, n_round, len(malicious), self.cfg.z_override)
            out = {c: ModelUpdate(upd.delta.copy(), upd.sample_size) for c in malicious}
        elif name == "fang":
            upd = baseline_fang(stats, self.cfg.fang_local_defense)
            entry["gamma"] = upd.meta["gamma"]
            out = {c: ModelUpdate(upd.delta.copy(), upd.sample_size) for c in malicious}
        else:
            raise ConfigError(f"unknown attack {name!r}")
        self.history.append(entry)
        return out

    def _data_poison(self, round_index, params, c, ctx):
        samples = ctx.samples_for(c, round_index)
        if not samples:
            return ModelUpdate(np.zeros(params.layout.total_len), 0)
        name = self.cfg.name
        if name == "lf":
            samples = baseline_lf(samples)
        elif name == "pop":
            if self._cold_rows is None:
                self._cold_rows = cold_news(ctx.corpus.click_counts(), ctx.attack_rng(0, 1))
            samples = baseline_pop(samples, self._cold_rows, ctx.attack_rng(round_index, c + 1))
        else:
            model, corpus = ctx.model, ctx.corpus
            rows = self.known_rows(ctx)
            known_reprs = model.encode_corpus(params, corpus, rows)
            hist = corpus.history_indices(corpus.clients[c], model.config.max_history_len)
            user = model.encode_users(params, model.encode_corpus(params, corpus), [hist])[0]
            samples = baseline_fedattack(user, samples, rows, known_reprs, model.config.negatives)
        return train_on_samples(params, samples, ctx.model, ctx.corpus, ctx.cfg)

    def stats(self) -> dict:
        return {"neighbor_rebuilds": self.neighbors.rebuilds, "rounds_attacked": len(self.history)}


def make_attack(cfg: AttackConfig | None):
    if cfg is None or cfg.name == "none":
        return None
    return AttackPlan(cfg)
