import json

import numpy as np
import pytest

from core.helpers.gaussian_oracle import GaussianPriorScore
from core.helpers.measurement_process import ForwardProcess, MeasurementOperator
from core.helpers.schedule import Schedule
from core.helpers.score_net import (
    Adam,
    ScoreNet,
    TrainConfig,
    dsm_loss,
    finetune,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_embedding,
    train,
)
from core.services.verification import check_dsm_gradient


@pytest.fixture
def fp2() -> ForwardProcess:
    return ForwardProcess(MeasurementOperator("identity", 2, 1.0), Schedule("cosine"))


@pytest.fixture
def small_net() -> ScoreNet:
    return ScoreNet(2, hidden_width=8, depth=2, time_embed_dim=4, rng=np.random.default_rng(0))


class TestEmbedding:
    def test_shape_and_bounds(self):
        emb = sinusoidal_embedding(np.array([0.0, 0.5, 1.0]), 6)
        assert emb.shape == (3, 6)
        assert np.all(np.abs(emb) <= 1.0)

    def test_odd_width_padded(self):
        assert sinusoidal_embedding(np.array([0.2]), 5).shape == (1, 5)

    def test_distinguishes_times(self):
        emb = sinusoidal_embedding(np.array([0.3, 0.31]), 16)
        assert not np.allclose(emb[0], emb[1])


class TestScoreNet:
    def test_widths_and_parameter_count(self, small_net):
        assert small_net.widths == [6, 8, 8, 2]
        assert small_net.parameter_count == 6 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2

    def test_zero_head_outputs_zero(self, small_net, rng):
        np.testing.assert_array_equal(small_net.forward(rng.standard_normal((4, 2)), 0.5), np.zeros((4, 2)))

    def test_single_state_shape(self, small_net):
        assert small_net.score(np.zeros(2), 0.3).shape == (2,)

    def test_same_seed_same_weights(self):
        a = ScoreNet(3, rng=np.random.default_rng(4))
        b = ScoreNet(3, rng=np.random.default_rng(4))
        for (wa, _), (wb, _) in zip(a.layers, b.layers):
            np.testing.assert_array_equal(wa, wb)

    def test_rejects_bad_time(self, small_net):
        with pytest.raises(ValueError):
            small_net.forward(np.zeros(2), 1.5)

    def test_rejects_bad_activation(self):
        with pytest.raises(ValueError, match="Unsupported activation"):
            ScoreNet(2, activation="relu6")

    def test_non_finite_raises(self, small_net):
        w, b = small_net.layers[0]
        w[...] = np.inf
        with pytest.raises(ScoreNet.NonFiniteError) as err:
            small_net.forward(np.ones(2), 0.5)
        assert err.value.layer == 0

    def test_copy_is_independent(self, small_net):
        clone = small_net.copy()
        clone.layers[0][0][0, 0] += 1.0
        assert small_net.layers[0][0][0, 0] != clone.layers[0][0][0, 0]


class TestDSMLoss:
    def test_gradient_check(self, rng):
        result = check_dsm_gradient(rng)
        assert result.passed, result.error

    @pytest.mark.parametrize("activation", ["silu", "tanh"])
    def test_gradient_check_noise_weighting(self, activation, fp2, rng):
        net = ScoreNet(2, hidden_width=6, depth=2, time_embed_dim=4, activation=activation, rng=rng, zero_head=False)
        batch = rng.standard_normal((4, 2))
        t = np.array([0.3, 0.5, 0.7, 0.9])
        noise = rng.standard_normal(batch.shape)
        _, grads = dsm_loss(net, batch, fp2, t, noise=noise, weighting="noise")
        h = 1e-5
        w = net.layers[1][0]
        w[2, 3] += h
        up, _ = dsm_loss(net, batch, fp2, t, noise=noise, weighting="noise", compute_grads=False)
        w[2, 3] -= 2 * h
        down, _ = dsm_loss(net, batch, fp2, t, noise=noise, weighting="noise", compute_grads=False)
        w[2, 3] += h
        assert grads[1][0][2, 3] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8)

    def test_zero_output_loss_is_noise_energy(self, fp2, rng):
        t = 0.5
        batch = np.zeros((4000, 2))
        noise = rng.standard_normal(batch.shape)
        net = ScoreNet(2, hidden_width=4, depth=1, time_embed_dim=0)
        loss, _ = dsm_loss(net, batch, fp2, t, noise=noise, compute_grads=False)
        assert loss == pytest.approx(2.0 / fp2.schedule.gamma_sq(t), rel=0.05)

    def test_times_below_t_min_rejected(self, small_net, fp2, rng):
        with pytest.raises(ValueError):
            dsm_loss(small_net, np.zeros((2, 2)), fp2, 1e-4, rng=rng)


class TestAdam:
    def test_frozen_layers_untouched(self, small_net):
        before = [w.copy() for w, _ in small_net.layers]
        grads = [(np.ones_like(w), np.ones_like(b)) for w, b in small_net.layers]
        opt = Adam(small_net.layers, lr=0.1)
        opt.step(small_net.layers, grads, [False, True, False])
        np.testing.assert_array_equal(small_net.layers[0][0], before[0])
        np.testing.assert_array_equal(small_net.layers[2][0], before[2])
        np.testing.assert_allclose(small_net.layers[1][0], before[1] - 0.1, atol=1e-7)


class TestTrain:
    def test_deterministic_given_seed(self, fp2):
        cfg = TrainConfig(epochs=3, batch_size=8)
        prior = np.random.default_rng(1).standard_normal((32, 2))
        a, ha = train(ScoreNet(2, hidden_width=8, depth=2, rng=np.random.default_rng(0)), prior, fp2, cfg, np.random.default_rng(9))
        b, hb = train(ScoreNet(2, hidden_width=8, depth=2, rng=np.random.default_rng(0)), prior, fp2, cfg, np.random.default_rng(9))
        assert ha.train_loss == hb.train_loss
        for (wa, _), (wb, _) in zip(a.layers, b.layers):
            np.testing.assert_array_equal(wa, wb)

    def test_history_lengths(self, fp2, small_net, rng):
        cfg = TrainConfig(epochs=4, batch_size=8, validation_split=0.25)
        _, history = train(small_net, rng.standard_normal((20, 2)), fp2, cfg, rng)
        assert history.epochs == 4
        assert len(history.val_loss) == 4

    def test_small_prior_samples_with_replacement(self, fp2, small_net, rng):
        cfg = TrainConfig(epochs=2, batch_size=64, validation_split=0.0)
        _, history = train(small_net, rng.standard_normal((5, 2)), fp2, cfg, rng)
        assert history.epochs == 2

    def test_zero_epochs_returns_copy(self, fp2, small_net, rng):
        net, history = train(small_net, rng.standard_normal((8, 2)), fp2, TrainConfig(epochs=0), rng)
        assert history.epochs == 0
        assert net is not small_net

    def test_does_not_mutate_input_net(self, fp2, rng):
        net = ScoreNet(2, hidden_width=8, depth=2, rng=rng, zero_head=False)
        before = [w.copy() for w, _ in net.layers]
        train(net, rng.standard_normal((16, 2)), fp2, TrainConfig(epochs=2, batch_size=8), rng)
        for (w, _), w0 in zip(net.layers, before):
            np.testing.assert_array_equal(w, w0)

    def test_finetune_freezes_leading_layers(self, fp2, rng):
        net = ScoreNet(2, hidden_width=8, depth=3, rng=rng, zero_head=False)
        cfg = TrainConfig(epochs=5, batch_size=8, finetune_layers=2, finetune_epochs=3)
        tuned, history = finetune(net, rng.standard_normal((16, 2)), fp2, cfg, rng)
        assert history.epochs == 3
        for i in range(2):
            np.testing.assert_array_equal(tuned.layers[i][0], net.layers[i][0])
        assert not np.array_equal(tuned.layers[-1][0], net.layers[-1][0])

    def test_finetune_all_frozen_leaves_net_unchanged(self, fp2, rng):
        net = ScoreNet(2, hidden_width=8, depth=2, rng=rng, zero_head=False)
        cfg = TrainConfig(epochs=3, batch_size=8, finetune_layers=0)
        tuned, _ = finetune(net, rng.standard_normal((16, 2)), fp2, cfg, rng)
        for (w, b), (w0, b0) in zip(tuned.layers, net.layers):
            np.testing.assert_array_equal(w, w0)
            np.testing.assert_array_equal(b, b0)

    def test_one_adam_step_per_epoch(self, identity_fp, mocker):
        rng = np.random.default_rng(3)
        step_spy = mocker.spy(Adam, "step")
        cfg = TrainConfig(epochs=5, batch_size=32)
        _, history = train(ScoreNet(3, hidden_width=8, depth=2, rng=rng), rng.standard_normal((100, 3)), identity_fp, cfg, rng)
        assert history.epochs == 5
        assert step_spy.call_count == 5

    def test_full_pass_epoch_mode_sweeps_training_split(self, identity_fp, mocker):
        rng = np.random.default_rng(3)
        step_spy = mocker.spy(Adam, "step")
        cfg = TrainConfig(epochs=5, batch_size=32, epoch_mode="full_pass")
        train(ScoreNet(3, hidden_width=8, depth=2, rng=rng), rng.standard_normal((100, 3)), identity_fp, cfg, rng)
        assert step_spy.call_count == 15

    def test_unknown_epoch_mode(self):
        with pytest.raises(ValueError, match="epoch_mode"):
            TrainConfig(epoch_mode="sweep")

    def test_loss_moving_average_non_increasing(self, fp2):
        rng = np.random.default_rng(2)
        prior = rng.standard_normal((2048, 2))
        cfg = TrainConfig(epochs=200, batch_size=2048, learning_rate=1e-3, loss_weighting="noise", validation_split=0.0)
        _, history = train(ScoreNet(2, hidden_width=32, depth=2, rng=rng), prior, fp2, cfg, rng)
        moving = np.convolve(history.train_loss, np.ones(20) / 20, mode="valid")
        assert np.all(np.diff(moving) <= 0.01 * moving[:-1])
        assert moving[-1] < moving[0]

    def test_recovers_gaussian_score(self, fp2):
        rng = np.random.default_rng(0)
        prior = rng.standard_normal((2000, 2))
        cfg = TrainConfig(epochs=1000, batch_size=128, learning_rate=3e-3, loss_weighting="noise", validation_split=0.0)
        net, _ = train(ScoreNet(2, hidden_width=64, depth=3, rng=rng), prior, fp2, cfg, rng)
        oracle = GaussianPriorScore(fp2, np.zeros(2), np.eye(2))
        probe = rng.standard_normal((500, 2)) * 1.2
        for t in (0.3, 0.6, 0.9):
            learned = net.score(probe, t)
            exact = oracle.score(probe, t)
            np.testing.assert_allclose(exact, -probe / (1.0 + fp2.schedule.gamma_sq(t)), rtol=1e-10)
            cos = np.sum(learned * exact) / (np.linalg.norm(learned) * np.linalg.norm(exact))
            assert cos >= 0.95, f"t={t}: cosine similarity {cos:.3f}"


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        net = ScoreNet(3, hidden_width=5, depth=2, activation="tanh", rng=rng, zero_head=False)
        path = save_checkpoint(net, str(tmp_path / "net.bin"), extra={"step": 100})
        loaded = load_checkpoint(path)
        x = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(loaded.forward(x, 0.4), net.forward(x, 0.4))
        meta = json.loads((tmp_path / "net.bin.json").read_text())
        assert meta["step"] == 100
        assert meta["parameter_count"] == net.parameter_count

    def test_rejects_foreign_file(self, tmp_path, rng):
        path = save_checkpoint(ScoreNet(2, rng=rng), str(tmp_path / "net.bin"))
        with open(path, "r+b") as fh:
            fh.write(b"NOTANET!")
        with pytest.raises(ValueError, match="not a score-net checkpoint"):
            load_checkpoint(path)
