# 文件: tests/test_encoder_trainer.py
import math

import numpy as np
import pytest
import torch
from torch import nn
from torch.func import functional_call

import nn_core
from config import EncoderVariant, TrainingConfig
from conftest import make_two_regime_series
from encoder_trainer import (EncoderTrainer, WindowPool, ae_loss, context_end_indices, drive2vec_loss,
                             estimate_neighborhood, make_pairs, make_triples, neighborhood_objective,
                             sample_tnc_partners, tloss_loss, tnc_loss, train_ae, train_encoder, train_vame,
                             triplet_objective, vame_loss)
from encoders import EncoderModel, encode_series, raw_representation
from errors import ConfigError, DataError, NumericalError
from evaluation import align_labels, embedding_silhouette
from synthgen import RegimeSpec, generate_session


def _t(array):
    return nn_core.as_tensor(np.asarray(array, dtype=np.float64))


class _LossModule(nn.Module):
    """把编码器和辅助头注册为子模块，forward 计算给定损失，供 functional_call 替换参数。"""

    def __init__(self, model, loss_fn):
        super().__init__()
        self.encoder = model.encoder
        self.heads = model.heads
        self.model = model
        self.loss_fn = loss_fn

    def forward(self):
        return self.loss_fn(self.model)[0]


def _gradcheck(model, loss_fn):
    wrapper = _LossModule(model, loss_fn)
    names = [name for name, _ in wrapper.named_parameters()]
    values = tuple(p.detach().clone().requires_grad_(True) for _, p in wrapper.named_parameters())

    def f(*flat):
        return functional_call(wrapper, dict(zip(names, flat)), ())

    return torch.autograd.gradcheck(f, values, eps=1e-5, atol=1e-7, rtol=1e-4)


class TestSampleConstruction:
    def test_pair_grid(self):
        assert context_end_indices(50, 10, 3).tolist() == list(range(10, 41, 3))

    def test_pairs_are_adjacent(self):
        series = make_two_regime_series(n_per_regime=25, switches=2)
        current, nxt = make_pairs([series], 10, 3)
        assert current.shape == (11, 2, 10)
        np.testing.assert_array_equal(current[0], series.data[:, 0:10])
        np.testing.assert_array_equal(nxt[0], series.data[:, 10:20])
        np.testing.assert_array_equal(nxt[-1], series.data[:, 40:50])

    def test_triples_need_room_for_past(self):
        series = make_two_regime_series(n_per_regime=25, switches=2)
        past, current, future = make_triples([series], 10, 3, with_past=True)
        assert len(past) == len(current) == len(future) == len(range(20, 41, 3))
        np.testing.assert_array_equal(past[0], series.data[:, 0:10])
        np.testing.assert_array_equal(current[0], series.data[:, 10:20])
        np.testing.assert_array_equal(future[0], series.data[:, 20:30])
        no_past, _, _ = make_triples([series], 10, 3, with_past=False)
        assert no_past is None

    def test_too_short_collection(self):
        series = make_two_regime_series(n_per_regime=5, switches=2)
        with pytest.raises(DataError):
            make_pairs([series], 10, 1)

    def test_window_pool_addresses_all_windows(self, rng):
        collection = [make_two_regime_series(n_per_regime=10, switches=2, seed=s) for s in range(3)]
        pool = WindowPool(collection, 5)
        assert pool.total == 3 * 16
        which, starts = pool.sample(rng, 200)
        assert np.all((which >= 0) & (which < 3))
        assert np.all((starts >= 0) & (starts <= 15))
        gathered = pool.gather(which, starts)
        i = 7
        np.testing.assert_array_equal(gathered[i], collection[which[i]].data[:, starts[i]:starts[i] + 5])


class TestLossFunctions:
    def test_triplet_zero_embeddings(self):
        k = 4
        loss = triplet_objective(torch.zeros(3, 5, dtype=nn_core.DTYPE), torch.zeros(3, 5, dtype=nn_core.DTYPE),
                                 torch.zeros(3, k, 5, dtype=nn_core.DTYPE))
        assert loss.item() == pytest.approx((1 + k) * math.log(2))

    def test_triplet_confident_embeddings(self):
        loss = triplet_objective(_t([[1.0, 0.0]]), _t([[10.0, 0.0]]), _t([[[-10.0, 0.0]]]))
        assert loss.item() == pytest.approx(2 * math.log1p(math.exp(-10)), rel=1e-9)
        assert loss.item() == pytest.approx(9.1e-5, rel=0.01)

    @pytest.mark.parametrize('w_pu', [0.0, 0.05, 0.5])
    def test_neighborhood_maximum_entropy(self, w_pu):
        loss = neighborhood_objective(torch.zeros(6, dtype=nn_core.DTYPE), torch.zeros(6, dtype=nn_core.DTYPE), w_pu)
        assert loss.item() == pytest.approx(math.log(2))

    def test_neighborhood_without_pu_weight(self):
        neighbor = _t([0.3, -1.2])
        distant = _t([2.0, -0.5, 0.1])
        loss = neighborhood_objective(neighbor, distant, 0.0)
        expected = torch.cat([
            torch.nn.functional.binary_cross_entropy_with_logits(neighbor, torch.ones(2, dtype=nn_core.DTYPE),
                                                                 reduction='none'),
            torch.nn.functional.binary_cross_entropy_with_logits(distant, torch.zeros(3, dtype=nn_core.DTYPE),
                                                                 reduction='none'),
        ]).mean()
        assert loss.item() == pytest.approx(expected.item())

    def test_kl_closed_form(self):
        assert nn_core.kl_standard_normal(torch.zeros(4, 3, dtype=nn_core.DTYPE),
                                          torch.zeros(4, 3, dtype=nn_core.DTYPE)).item() == 0.0
        assert nn_core.kl_standard_normal(_t([[1.0]]), _t([[0.0]])).item() == pytest.approx(0.5)

    @pytest.mark.parametrize('variant, reconstruction_terms', [('VAME', 2), ('VAMEstar', 3)])
    def test_vame_term_structure(self, variant, reconstruction_terms, tiny_training, rng):
        model = EncoderModel(variant, d=2, w=4, e=3, training=tiny_training)
        windows = [_t(rng.normal(size=(5, 2, 4))) for _ in range(3)]
        _, terms = vame_loss(model, windows[0], windows[1], windows[2])
        decoders = [name for name in terms if name in ('reconstruct', 'future', 'past')]
        assert len(decoders) == reconstruction_terms
        assert 'kl' in terms and 'kmeans' not in terms
        _, terms = vame_loss(model, windows[0], windows[1], windows[2], kmeans_weight=0.5, kmeans_k=2)
        assert 'kmeans' in terms

    def test_vamestar_requires_past(self, tiny_training, rng):
        model = EncoderModel('VAMEstar', d=2, w=4, e=3, training=tiny_training)
        with pytest.raises(DataError):
            vame_loss(model, _t(rng.normal(size=(2, 2, 4))), _t(rng.normal(size=(2, 2, 4))))


@pytest.mark.parametrize('seed', range(20))
class TestGradients:
    @pytest.fixture
    def data(self, seed):
        return np.random.default_rng(seed)

    @pytest.fixture
    def batch(self, data):
        return [_t(data.normal(size=(3, 2, 4))) for _ in range(3)]

    def _model(self, variant, training, seed):
        return EncoderModel(variant, d=2, w=4, e=3, training=training, seed=seed)

    def test_ae(self, seed, tiny_training, batch):
        model = self._model('AE', tiny_training, seed)
        assert _gradcheck(model, lambda m: ae_loss(m, batch[0]))

    def test_drive2vec(self, seed, tiny_training, batch):
        model = self._model('Drive2Vec', tiny_training, seed)
        assert _gradcheck(model, lambda m: drive2vec_loss(m, batch[0], batch[1]))

    @pytest.mark.parametrize('variant', ['VAME', 'VAMEstar'])
    def test_vame(self, seed, variant, tiny_training, batch, data):
        model = self._model(variant, tiny_training, seed)
        noise = _t(data.normal(size=(3, 3)))
        assert _gradcheck(model, lambda m: vame_loss(m, batch[0], batch[1], batch[2], beta_kl=0.7, noise=noise,
                                                     kmeans_weight=0.1, kmeans_k=2))

    def test_tloss(self, seed, tiny_training, batch, data):
        model = self._model('TLoss', tiny_training, seed)
        negatives = _t(data.normal(size=(3, 2, 2, 4)))
        assert _gradcheck(model, lambda m: tloss_loss(m, batch[0], batch[1], negatives))

    def test_tnc(self, seed, tiny_training, batch):
        model = self._model('TNC', tiny_training, seed)
        assert _gradcheck(model, lambda m: tnc_loss(m, batch[0], batch[1], batch[2], 0.05))


class TestNeighborhood:
    def test_max_radius_one(self, rng):
        data = rng.normal(size=(2, 200))
        for t in (10, 100, 200):
            assert estimate_neighborhood(data, t, 10, max_radius=1) == 1

    def test_anchor_out_of_range(self, rng):
        with pytest.raises(DataError):
            estimate_neighborhood(rng.normal(size=(1, 50)), 5, 10)

    def test_white_noise_reaches_maximum(self):
        hits = 0
        for seed in range(50):
            data = np.random.default_rng(seed).normal(size=(1, 300))
            hits += estimate_neighborhood(data, 150, 20, alpha=0.01, max_radius=5) == 5
        assert hits >= 40

    def test_stops_before_mean_shift(self):
        w, t = 20, 150
        hits = 0
        for seed in range(50):
            data = np.random.default_rng(seed).normal(size=(1, 300))
            data[:, t + w:] += 10.0
            hits += estimate_neighborhood(data, t, w, alpha=0.01, max_radius=5) == 1
        assert hits >= 40

    def test_partner_sampling_respects_radius(self, rng):
        series = make_two_regime_series(n_per_regime=100, switches=2)
        pool = WindowPool([series], 10)
        ends = np.full(500, 100)
        which = np.zeros(500, dtype=np.int64)
        (n_which, n_start), (d_which, d_start) = sample_tnc_partners(pool, rng, which, ends, np.full(500, 2))
        neighbor_ends, distant_ends = n_start + 10, d_start + 10
        assert np.all((neighbor_ends >= 80) & (neighbor_ends <= 120))
        assert np.all((distant_ends < 80) | (distant_ends > 120))
        assert np.all((distant_ends >= 10) & (distant_ends <= series.n))

    def test_partner_sampling_without_room_falls_back_to_pool(self, rng):
        series = make_two_regime_series(n_per_regime=15, switches=2)
        pool = WindowPool([series], 10)
        _, (d_which, d_start) = sample_tnc_partners(pool, rng, np.zeros(20, dtype=np.int64), np.full(20, 15),
                                                    np.full(20, 5))
        assert np.all((d_start >= 0) & (d_start <= series.n - 10))


class TestTrainingLoop:
    def test_zero_epochs_leave_parameters_unchanged(self, tiny_training, rng):
        model = EncoderModel('AE', d=2, w=4, e=3, training=tiny_training.model_copy(update={'epochs': 0}))
        before = model.parameters().snapshot()
        result = train_ae(model, rng.normal(size=(10, 2, 4)))
        assert result.loss_history == []
        for name, tensor in model.parameters():
            assert torch.equal(tensor, before[name])

    def test_constant_windows_reconstruct(self, tiny_training):
        config = tiny_training.model_copy(update={'epochs': 300, 'learning_rate': 1e-2, 'log_every': 100})
        model = EncoderModel('AE', d=2, w=4, e=3, training=config)
        result = train_ae(model, np.ones((8, 2, 4)))
        assert result.final_loss < 1e-3
        assert result.loss_history[-1] < result.loss_history[0]

    def test_wrong_variant(self, tiny_training, rng):
        model = EncoderModel('TNC', d=2, w=4, e=3, training=tiny_training)
        with pytest.raises(ConfigError):
            train_ae(model, rng.normal(size=(4, 2, 4)))

    def test_vame_ignores_past_for_plain_vame(self, tiny_training, rng):
        model = EncoderModel('VAME', d=2, w=4, e=3, training=tiny_training)
        arrays = [rng.normal(size=(6, 2, 4)) for _ in range(3)]
        result = train_vame(model, arrays[1], arrays[2], arrays[0])
        assert len(result.loss_history) == tiny_training.epochs
        assert 'past' not in result.component_history[-1]

    def test_non_finite_loss_stops_and_restores(self, tiny_training):
        model = EncoderModel('TLoss', d=2, w=4, e=3, training=tiny_training)
        trainer = EncoderTrainer(model)
        x = _t(np.ones((2, 2, 4)))
        snapshots = []

        def loss_fn(step):
            if step == 1:
                snapshots.append(model.parameters().snapshot())
                z, _, _ = model.embed(x)
                return z.sum() * float('nan'), {}
            z, _, _ = model.embed(x)
            loss = (z ** 2).mean()
            return loss, {'square': loss}

        with pytest.raises(NumericalError):
            trainer.run_steps(3, loss_fn)
        assert model.steps_trained == 1
        for name, tensor in model.parameters():
            assert torch.equal(tensor, snapshots[0][name])

    @pytest.mark.parametrize('variant', [v for v in EncoderVariant if v.trainable])
    def test_train_encoder_smoke(self, variant, tiny_training, two_regime_series):
        model = EncoderModel(variant, d=2, w=5, e=3, training=tiny_training)
        result = train_encoder(model, [two_regime_series])
        expected = tiny_training.tloss_steps if variant is EncoderVariant.TLOSS else tiny_training.epochs
        assert len(result.loss_history) == expected
        assert all(np.isfinite(result.loss_history))
        assert model.frozen

    def test_training_is_deterministic(self, tiny_training, two_regime_series):
        def run():
            model = EncoderModel('VAMEstar', d=2, w=5, e=3, training=tiny_training)
            train_encoder(model, [two_regime_series])
            return model.parameters().snapshot()

        first, second = run(), run()
        for name in first:
            assert torch.equal(first[name], second[name])

    @pytest.mark.slow
    def test_tloss_separates_regimes(self, tiny_training):
        series = make_two_regime_series(n_per_regime=300, switches=6, shift=3.0)
        config = tiny_training.model_copy(update={'tloss_steps': 300, 'batch_size': 16, 'learning_rate': 1e-3,
                                                  'hidden_channels': 16, 'log_every': 100})
        model = EncoderModel('TLoss', d=2, w=10, e=4, training=config)
        train_encoder(model, [series])
        rep = encode_series(model, series)
        labels = series.labels[9:]
        z = rep.values
        a, b = z[labels == 0], z[labels == 1]
        within = 0.5 * ((a @ a.T).mean() + (b @ b.T).mean())
        assert within > (a @ b.T).mean()


def _dynamics_only_series(seed=3):
    """两个事件均值、平稳方差都相同: 一个缓慢漂移，一个逐步翻转。"""
    regimes = [RegimeSpec(label=0, name='drift', mean=[0.0, 0.0], transition=[[0.95, 0.0], [0.0, 0.95]],
                          noise_scale=math.sqrt(1 - 0.95 ** 2), duration_range=(8.0, 12.0)),
               RegimeSpec(label=1, name='flip', mean=[0.0, 0.0], transition=[[-0.95, 0.0], [0.0, -0.95]],
                          noise_scale=math.sqrt(1 - 0.95 ** 2), duration_range=(8.0, 12.0))]
    return generate_session(regimes, [[0.0, 1.0], [1.0, 0.0]], length_seconds=240.0, seed=seed)


@pytest.mark.slow
@pytest.mark.parametrize('variant', [v for v in EncoderVariant if v.trainable])
def test_trained_embeddings_beat_raw_windows_on_silhouette(variant):
    series = _dynamics_only_series()
    w = 10
    labels = align_labels(series.labels, w)
    training = TrainingConfig(epochs=30, tloss_steps=300, batch_size=32, hidden_channels=16,
                              learning_rate=1e-3, log_every=100, seed=7)
    model = EncoderModel(variant, d=2, w=w, e=4, training=training)
    train_encoder(model, [series])
    trained = embedding_silhouette(encode_series(model, series).values, labels)
    raw = embedding_silhouette(raw_representation(series, w).values, labels)
    assert trained > raw
