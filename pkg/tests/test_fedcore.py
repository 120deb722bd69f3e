import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedrecsim.data import SynthSpec, build_train_samples, load_corpus, synth_generate
from fedrecsim.fedcore import (
    STREAM_INIT, STREAM_TRAIN, AggregationError, ConfigError, FedAvg, FedConfig,
    NonFiniteUpdate, ServerOptState, fedadam_step, fedavg_aggregate, local_train,
    round_rng, run_training, sample_clients,
)
from fedrecsim.model import AttnRec, ModelConfig
from fedrecsim.params import ModelUpdate, ParamVector, SegmentMap

from conftest import TINY_SPEC

LAYOUT = SegmentMap.from_lengths({"news_model": 1, "user_model": 1})


def scalar_params(x):
    return ParamVector(np.array([x, 0.0]), LAYOUT)


class TestFedConfig:
    @pytest.mark.parametrize("field,value", [
        ("clients_per_round", 0), ("learning_rate", -1.0), ("beta1", 1.0),
        ("beta2", -0.1), ("tau", 0.0), ("local_epochs", 0),
    ])
    def test_invalid(self, field, value):
        with pytest.raises(ConfigError):
            FedConfig(**{field: value}).validate(100)

    def test_k_above_n(self):
        with pytest.raises(ConfigError):
            FedConfig(clients_per_round=11).validate(10)


class TestSampleClients:
    def test_forced(self):
        assert sample_clients(np.random.default_rng(0), 3, 3) == [0, 1, 2]

    def test_deterministic_and_sorted(self):
        a = sample_clients(np.random.default_rng(9), 1000, 50)
        assert a == sample_clients(np.random.default_rng(9), 1000, 50)
        assert a == sorted(set(a)) and len(a) == 50

    def test_too_many(self):
        with pytest.raises(ConfigError):
            sample_clients(np.random.default_rng(0), 3, 4)

    def test_uniform_frequency(self):
        rng = np.random.default_rng(0)
        counts = np.zeros(10)
        draws = 100_000
        for _ in range(draws):
            counts[sample_clients(rng, 10, 3)] += 1
        sigma = math.sqrt(draws * 0.3 * 0.7)
        assert np.all(np.abs(counts - draws * 0.3) <= 3 * sigma)


class TestLocalTrain:
    def setup_method(self):
        self.corpus = synth_generate(TINY_SPEC, 0)
        self.model = AttnRec(ModelConfig(vocab_size=self.corpus.vocab_size, embed_dim=4))
        self.params = self.model.init_params(0)

    def test_zero_lr(self):
        u = local_train(self.params, self.corpus.clients[0], FedConfig(learning_rate=0.0),
                        self.model, self.corpus, np.random.default_rng(0))
        assert np.array_equal(u.delta, np.zeros_like(u.delta))

    def test_single_step_identity(self):
        cfg = FedConfig(learning_rate=0.05)
        client = self.corpus.clients[1]
        u = local_train(self.params, client, cfg, self.model, self.corpus, np.random.default_rng(3))
        samples, _ = build_train_samples(client, 4, np.random.default_rng(3), self.corpus, 50)
        _, grad = self.model.client_loss_and_grad(self.params, samples, self.corpus)
        np.testing.assert_allclose(u.delta, -0.05 * grad, rtol=0, atol=1e-12)

    def test_sample_size_counts_positives(self):
        news = "".join(f"N{i}\tc\ts\tw{i}\n" for i in range(6))
        beh = "1\tU1\tt\tN5\tN0-1 N1-1 N2-0\n2\tU1\tt\tN5\tN3-1 N4-0\n"
        corpus = load_corpus(news, beh, split="train")
        model = AttnRec(ModelConfig(vocab_size=corpus.vocab_size, embed_dim=3))
        u = local_train(model.init_params(0), corpus.clients[0], FedConfig(), model, corpus,
                        np.random.default_rng(0))
        assert u.sample_size == 3

    def test_no_samples_gives_zero_update(self):
        news = "N0\tc\ts\tw\nN1\tc\ts\tv\n"
        corpus = load_corpus(news, "1\tU1\tt\t\tN0-1 N1-1\n", split="train")
        model = AttnRec(ModelConfig(vocab_size=corpus.vocab_size, embed_dim=3))
        u = local_train(model.init_params(0), corpus.clients[0], FedConfig(), model, corpus,
                        np.random.default_rng(0))
        assert u.sample_size == 0 and not u.delta.any()


def _updates(rng, n, dim=7):
    return [ModelUpdate(rng.normal(size=dim), int(rng.integers(0, 20))) for _ in range(n)]


class TestFedAvg:
    def test_weighted_mean(self):
        out = fedavg_aggregate([ModelUpdate(np.array([1.0]), 1), ModelUpdate(np.array([3.0]), 3)])
        assert out.tolist() == [2.5]

    def test_equal_sizes_mean(self):
        ds = [np.array([1.0, 2.0]), np.array([4.0, -2.0]), np.array([7.0, 3.0])]
        out = fedavg_aggregate([ModelUpdate(d, 5) for d in ds])
        np.testing.assert_allclose(out, np.mean(ds, axis=0), rtol=0, atol=1e-15)

    def test_loop_oracle(self):
        rng = np.random.default_rng(2)
        ups = _updates(rng, 10)
        ups[0].sample_size = 4
        total = sum(u.sample_size for u in ups)
        expected = [sum(u.sample_size * u.delta[i] for u in ups) / total for i in range(7)]
        np.testing.assert_allclose(fedavg_aggregate(ups), expected, rtol=0, atol=1e-12)

    def test_zero_size_excluded(self):
        out = fedavg_aggregate([ModelUpdate(np.array([1.0]), 2), ModelUpdate(np.array([1e9]), 0)])
        assert out.tolist() == [1.0]

    def test_all_zero_sizes(self):
        with pytest.raises(AggregationError):
            fedavg_aggregate([ModelUpdate(np.array([1.0]), 0)])

    def test_meta_weights(self):
        _, meta = FedAvg().aggregate([ModelUpdate(np.array([1.0]), 1), ModelUpdate(np.array([3.0]), 3)])
        assert meta["weights"] == [0.25, 0.75]

    @given(st.integers(0, 2**31), st.integers(1, 1000))
    def test_scale_consistent(self, seed, c):
        ups = _updates(np.random.default_rng(seed), 6)
        ups[0].sample_size = 1
        scaled = [ModelUpdate(u.delta, u.sample_size * c) for u in ups]
        assert np.array_equal(fedavg_aggregate(ups), fedavg_aggregate(scaled))


def adam_reference(theta, aggs, b1=0.9, b2=0.99, tau=1e-8, lr=1.0):
    m = v = 0.0
    for g in aggs:
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta + lr * m / (math.sqrt(v) + tau)
    return theta, m, v


class TestFedAdam:
    def test_zero_agg(self):
        p = scalar_params(0.7)
        out, state = fedadam_step(ServerOptState.zeros(2), np.zeros(2), p, FedConfig())
        assert np.array_equal(out.values, p.values) and state.round == 1

    def test_first_step(self):
        out, state = fedadam_step(ServerOptState.zeros(2), np.array([1.0, 0.0]), scalar_params(0.0), FedConfig())
        assert abs(state.m[0] - 0.1) < 1e-15 and abs(state.v[0] - 0.01) < 1e-15
        assert abs(out.values[0] - 0.1 / (0.1 + 1e-8)) < 1e-15
        assert abs(out.values[0] - 0.99999990) < 1e-8

    @pytest.mark.parametrize("steps", [2, 5])
    def test_recurrence_oracle(self, steps):
        params, state = scalar_params(0.3), ServerOptState.zeros(2)
        cfg = FedConfig(server_lr=0.5)
        for _ in range(steps):
            params, state = fedadam_step(state, np.array([0.25, 0.0]), params, cfg)
        theta, m, v = adam_reference(0.3, [0.25] * steps, lr=0.5)
        assert abs(params.values[0] - theta) < 1e-12
        assert abs(state.m[0] - m) < 1e-12 and abs(state.v[0] - v) < 1e-12

    def test_non_finite_rejected(self):
        p, s = scalar_params(1.0), ServerOptState.zeros(2)
        with pytest.raises(NonFiniteUpdate):
            fedadam_step(s, np.array([np.nan, 0.0]), p, FedConfig())
        assert p.values.tolist() == [1.0, 0.0] and not s.m.any()

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=5))
    def test_second_moment_nonnegative(self, aggs):
        p, s = scalar_params(0.0), ServerOptState.zeros(2)
        for g in aggs:
            p, s = fedadam_step(s, np.array([g, -g]), p, FedConfig())
        assert np.all(s.v >= 0)


class TestRunTraining:
    def setup_method(self):
        self.corpus = synth_generate(TINY_SPEC, 0)
        self.model = AttnRec(ModelConfig(vocab_size=self.corpus.vocab_size, embed_dim=4))

    def test_one_round_changes_params(self):
        cfg = FedConfig(clients_per_round=3, rounds=1, learning_rate=0.1)
        init = self.model.init_params(0)
        res = run_training(self.corpus, self.model, cfg, init_params=init)
        assert any(s > 0 for s in res.records[0].sizes)
        assert not np.array_equal(res.params.values, init.values)

    def test_no_samples_round_skipped(self):
        news = "N0\tc\ts\tw\nN1\tc\ts\tv\n"
        corpus = load_corpus(news, "1\tU1\tt\t\tN0-1 N1-1\n", split="train")
        model = AttnRec(ModelConfig(vocab_size=corpus.vocab_size, embed_dim=3))
        init = model.init_params(0)
        res = run_training(corpus, model, FedConfig(clients_per_round=1, rounds=1), init_params=init)
        assert np.array_equal(res.params.values, init.values)
        assert res.records[0].status.startswith("skipped")

    def test_deterministic(self):
        cfg = FedConfig(clients_per_round=3, rounds=4, learning_rate=0.1, seed=5)
        a = run_training(self.corpus, self.model, cfg, eval_every=2)
        b = run_training(self.corpus, self.model, cfg, eval_every=2)
        assert a.evals == b.evals
        assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]
        assert np.array_equal(a.params.values, b.params.values)

    def test_client_sets_replay(self):
        cfg = FedConfig(clients_per_round=2, rounds=5, seed=11)
        res = run_training(self.corpus, self.model, cfg)
        from fedrecsim.fedcore import STREAM_SAMPLE
        for rec in res.records:
            assert rec.clients == sample_clients(round_rng(11, STREAM_SAMPLE, rec.round), 6, 2)

    def test_eval_schedule(self):
        cfg = FedConfig(clients_per_round=2, rounds=5)
        res = run_training(self.corpus, self.model, cfg, eval_every=2)
        assert [r for r, _ in res.evals] == [0, 2, 4, 5]

    def test_centralized_equivalence(self):
        spec = SynthSpec(n_users=1, n_news=12, n_topics=2, title_len=3, history_len=(2, 3),
                         impressions_per_user=(4, 4), candidates_per_impression=5,
                         tokens_per_topic=4, common_tokens=2)
        corpus = synth_generate(spec, 2)
        model = AttnRec(ModelConfig(vocab_size=corpus.vocab_size, embed_dim=4))
        cfg = FedConfig(clients_per_round=1, rounds=10, learning_rate=0.05, server_lr=0.01, seed=4)
        res = run_training(corpus, model, cfg)

        theta = model.init_params([4, STREAM_INIT]).values.copy()
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        for r in range(1, 11):
            samples, _ = build_train_samples(corpus.clients[0], 4, round_rng(4, STREAM_TRAIN, r, 0), corpus, 50)
            _, grad = model.client_loss_and_grad(theta, samples, corpus)
            g = (theta - 0.05 * grad) - theta  # update is theta_final - theta_initial
            m = 0.9 * m + 0.1 * g
            v = 0.99 * v + 0.01 * g * g
            theta = theta + 0.01 * m / (np.sqrt(v) + 1e-8)
        np.testing.assert_allclose(res.params.values, theta, rtol=0, atol=1e-12)

    def test_checkpoint_callback(self):
        seen = []
        run_training(self.corpus, self.model, FedConfig(clients_per_round=2, rounds=3),
                     checkpoint_rounds=[0, 2], on_checkpoint=lambda r, p: seen.append(r))
        assert seen == [0, 2]
