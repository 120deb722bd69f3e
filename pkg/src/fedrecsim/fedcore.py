"""Federated round loop with weighted FedAvg and a FedAdam server step."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, build_train_samples
from .metrics import EvalReport, evaluate
from .params import ModelUpdate, ParamVector, l2_norm

log = logging.getLogger(__name__)

# independent RNG streams, keyed alongside the run seed
STREAM_SAMPLE = 1
STREAM_TRAIN = 2
STREAM_ATTACK = 3
STREAM_INIT = 4


class ConfigError(ValueError):
    pass


class AggregationError(RuntimeError):
    pass


class NonFiniteUpdate(ArithmeticError):
    pass


@dataclass
class FedConfig:
    clients_per_round: int = 50
    rounds: int = 300
    learning_rate: float = 1e-4
    local_epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-8
    server_lr: float = 1.0
    seed: int = 0

    def validate(self, n_clients: int | None = None) -> None:
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be >= 1")
        if n_clients is not None and self.clients_per_round > n_clients:
            raise ConfigError(f"clients_per_round={self.clients_per_round} exceeds {n_clients} clients")
        if self.learning_rate < 0 or self.server_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.local_epochs < 1 or self.rounds < 0:
            raise ConfigError("local_epochs must be >= 1 and rounds >= 0")


@dataclass
class ServerOptState:
    m: np.ndarray
    v: np.ndarray
    round: int = 0

    @classmethod
    def zeros(cls, n: int) -> "ServerOptState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass
class RoundRecord:
    round: int
    clients: list[int]
    sizes: list[int]
    agg_norm: float
    defense_meta: dict = field(default_factory=dict)
    malicious: list[int] = field(default_factory=list)
    status: str = "ok"

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "clients": self.clients,
            "sizes": self.sizes,
            "agg_norm": self.agg_norm,
            "defense_meta": self.defense_meta,
            "malicious": self.malicious,
            "status": self.status,
        }


def round_rng(seed, stream, *keys):
    return np.random.default_rng([int(seed), stream, *(int(k) for k in keys)])


def sample_clients(rng, N: int, k: int) -> list[int]:
    if k > N or k < 0:
        raise ConfigError(f"cannot sample {k} clients out of {N}")
    return sorted(int(i) for i in rng.choice(N, size=k, replace=False))


def train_on_samples(params: ParamVector, samples, model, corpus, cfg: FedConfig) -> ModelUpdate:
    """Run ``local_epochs`` full-batch gradient steps and return the delta."""
    if not samples:
        return ModelUpdate(np.zeros(params.layout.total_len), 0)
    theta = params.values.copy()
    for _ in range(cfg.local_epochs):
        _, grad = model.client_loss_and_grad(theta, samples, corpus)
        theta -= cfg.learning_rate * grad
    return ModelUpdate(theta - params.values, len(samples))


def local_train(params, client, cfg, model, corpus, rng) -> ModelUpdate:
    samples, _ = build_train_samples(client, model.config.negatives, rng, corpus,
                                     model.config.max_history_len)
    return train_on_samples(params, samples, model, corpus, cfg)


def fedavg_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        raise AggregationError("every update reported sample size 0")
    return sizes / total


def fedavg_aggregate(updates: list[ModelUpdate]) -> np.ndarray:
    """Sample-size weighted mean of the deltas; size-0 updates carry no weight."""
    if not updates:
        raise AggregationError("no updates to aggregate")
    weights = fedavg_weights([u.sample_size for u in updates])
    out = np.zeros_like(updates[0].delta)
    for w, u in zip(weights, updates):
        if w > 0:
            out += w * u.delta
    return out


class FedAvg:
    name = "fedavg"

    def aggregate(self, updates):
        weights = fedavg_weights([u.sample_size for u in updates])
        return fedavg_aggregate(updates), {"rule": self.name, "weights": [float(w) for w in weights]}


def fedadam_step(state: ServerOptState, agg, params: ParamVector, cfg: FedConfig):
    """One FedAdam server step without bias correction.

    Returns ``(new_params, new_state)``; inputs are left untouched.
    """
    agg = np.asarray(agg, dtype=np.float64)
    if agg.shape != params.values.shape or agg.shape != state.m.shape:
        raise ValueError("aggregate, parameters and optimizer state differ in shape")
    if not np.all(np.isfinite(agg)):
        raise NonFiniteUpdate("aggregated update contains non-finite values")
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * agg
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * agg * agg
    values = params.values + cfg.server_lr * m / (np.sqrt(v) + cfg.tau)
    return ParamVector(values, params.layout), ServerOptState(m, v, state.round + 1)


@dataclass
class TrainingContext:
    """What attack plans may see: the corpus, model and client config."""

    corpus: Corpus
    model: object
    cfg: FedConfig

    def samples_for(self, client_index: int, round_index: int):
        rng = round_rng(self.cfg.seed, STREAM_TRAIN, round_index, client_index)
        samples, _ = build_train_samples(self.corpus.clients[client_index], self.model.config.negatives,
                                         rng, self.corpus, self.model.config.max_history_len)
        return samples

    def benign_update(self, params, client_index: int, round_index: int) -> ModelUpdate:
        samples = self.samples_for(client_index, round_index)
        return train_on_samples(params, samples, self.model, self.corpus, self.cfg)

    def attack_rng(self, round_index: int, *keys):
        return round_rng(self.cfg.seed, STREAM_ATTACK, round_index, *keys)


@dataclass
class TrainingResult:
    params: ParamVector
    evals: list[tuple[int, EvalReport]]
    records: list[RoundRecord]
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> EvalReport | None:
        return self.evals[-1][1] if self.evals else None


def calibrate_norm_bound(corpus, model, cfg: FedConfig, rounds: int = 10, init_params=None) -> float:
    """Median benign-update norm over the first attack-free rounds."""
    norms = []
    params = init_params if init_params is not None else model.init_params([cfg.seed, STREAM_INIT])
    state = ServerOptState.zeros(params.layout.total_len)
    ctx = TrainingContext(corpus, model, cfg)
    for r in range(1, rounds + 1):
        clients = sample_clients(round_rng(cfg.seed, STREAM_SAMPLE, r), len(corpus.clients),
                                 cfg.clients_per_round)
        updates = [ctx.benign_update(params, c, r) for c in clients]
        norms.extend(l2_norm(u.delta) for u in updates if u.sample_size > 0)
        try:
            params, state = fedadam_step(state, fedavg_aggregate(updates), params, cfg)
        except (AggregationError, NonFiniteUpdate):
            continue
    if not norms:
        raise AggregationError("no benign update observed during calibration")
    return float(np.median(norms))


def run_training(corpus: Corpus, model, cfg: FedConfig, attack=None, defense=None,
                 eval_every: int | None = None, init_params: ParamVector | None = None,
                 checkpoint_rounds=(), on_checkpoint=None) -> TrainingResult:
    """Simulate ``cfg.rounds`` federated rounds.

    Malicious clients occupy indices ``0 .. attack.malicious_count - 1``.
    When a defense is given it replaces weighted FedAvg. With
    ``eval_every`` set, the model is evaluated before round 1, every
    ``eval_every`` rounds and after the last round.
    """
    N = len(corpus.clients)
    cfg.validate(N)
    meta = {}
    params = init_params if init_params is not None else model.init_params([cfg.seed, STREAM_INIT])
    if defense is not None and getattr(defense, "needs_calibration", False):
        rho = calibrate_norm_bound(corpus, model, cfg, init_params=params)
        defense = defense.calibrated(rho)
        meta["rho"] = rho
    aggregator = defense if defense is not None else FedAvg()
    m_count = attack.malicious_count if attack is not None else 0
    if m_count >= N:
        raise ConfigError(f"malicious count {m_count} must be below the {N} clients")

    ctx = TrainingContext(corpus, model, cfg)
    state = ServerOptState.zeros(params.layout.total_len)
    evals = []
    records = []
    checkpoint_rounds = set(checkpoint_rounds)

    if eval_every:
        evals.append((0, evaluate(params, model, corpus)))
    if 0 in checkpoint_rounds and on_checkpoint is not None:
        on_checkpoint(0, params)

    for r in range(1, cfg.rounds + 1):
        clients = sample_clients(round_rng(cfg.seed, STREAM_SAMPLE, r), N, cfg.clients_per_round)
        malicious = [c for c in clients if c < m_count]
        updates = {}
        for c in clients:
            if c >= m_count:
                updates[c] = ctx.benign_update(params, c, r)
        if malicious:
            updates.update(attack.submit(r, params, malicious, ctx, n_round=len(clients)))

        kept = [c for c in clients if updates[c].sample_size > 0]
        record = RoundRecord(r, clients, [int(updates[c].sample_size) for c in clients], 0.0,
                             malicious=malicious)
        if not kept:
            record.status = "skipped: no client had samples"
            log.warning("round %d: %s", r, record.status)
        else:
            try:
                agg, dmeta = aggregator.aggregate([updates[c] for c in kept])
                dmeta["kept"] = kept
                record.defense_meta = dmeta
                record.agg_norm = l2_norm(agg)
                params, state = fedadam_step(state, agg, params, cfg)
            except AggregationError as exc:
                record.status = f"skipped: {exc}"
                log.warning("round %d: %s", r, exc)
            except NonFiniteUpdate as exc:
                record.status = f"rejected: {exc}"
                log.warning("round %d: %s", r, exc)
        records.append(record)

        if r in checkpoint_rounds and on_checkpoint is not None:
            on_checkpoint(r, params)
        if eval_every and (r % eval_every == 0 or r == cfg.rounds):
            evals.append((r, evaluate(params, model, corpus)))

    if attack is not None and hasattr(attack, "stats"):
        meta["attack"] = attack.stats()
    return TrainingResult(params, evals, records, meta)
