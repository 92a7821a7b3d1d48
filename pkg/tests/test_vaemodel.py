import math

import numpy as np
import pytest

from helpers import central_diff, rel_err
from sahmmvae import diffcore as dc
from sahmmvae import synthgen as sg
from sahmmvae import vaemodel as vm


def small_model(branch, m=2, n=2, K=2, seed=0, **kw):
    cfg = vm.TrainConfig(branch=branch, K=K, seed=seed, encoder_widths=(6, 5), **kw)
    model = vm.build_model(m, n, cfg)
    rng = np.random.default_rng(100 + seed)
    for name, t in model.prior.tensors.items():
        t.value = t.value + rng.normal(0.0, 0.3, t.shape)
    model.log_post_var.value = rng.normal(-1.0, 0.3, n)
    return model, cfg


def loss_grads(model, Y, beta, eps):
    with dc.recording() as tape:
        loss, parts = vm.total_loss(model, Y, beta, eps)
    tape.backward(loss)
    return {k: p.grad for k, p in model.parameters().items()}, parts


class TestMLP:
    def test_zero_weights(self):
        net = vm.MLP([3, 4, 2], np.random.default_rng(0), "enc")
        for p in net.parameters().values():
            p.value = np.zeros_like(p.value)
        np.testing.assert_array_equal(net(np.ones((5, 3))).value, np.zeros((5, 2)))

    def test_identity_affine(self):
        net = vm.MLP([3, 3], np.random.default_rng(0), "enc")
        net.weights[0].value = np.eye(3)
        Y = np.random.default_rng(1).normal(size=(7, 3))
        np.testing.assert_array_equal(net(Y).value, Y)

    def test_first_layer_gradient(self):
        net = vm.MLP([3, 8, 2], np.random.default_rng(2), "enc")
        Y = np.random.default_rng(3).normal(size=(6, 3))
        with dc.recording() as tape:
            out = net(Y).sum()
        tape.backward(out)
        W = net.weights[0]
        fd = central_diff(lambda: net(Y).value.sum(), W.value)
        assert rel_err(W.grad, fd) < 1e-5

    def test_input_width_checked(self):
        net = vm.MLP([3, 2], np.random.default_rng(0), "enc")
        with pytest.raises(dc.ShapeError):
            net(np.ones((4, 2)))


class TestLossPieces:
    def test_deterministic_limit(self):
        mu = np.random.default_rng(4).normal(size=(5, 2))
        S = vm.sample_latents(mu, np.full(2, -40.0), np.random.default_rng(5).normal(size=(5, 2)))
        np.testing.assert_allclose(S.value, mu, atol=1e-8)

    def test_unit_sample_spread(self):
        eps = vm.step_noise(3, 0, (50_000, 2))
        S = vm.sample_latents(np.zeros((50_000, 2)), np.zeros(2), eps).value
        assert abs(S.std() - 1.0) < 0.02

    def test_sample_gradient(self):
        rng = np.random.default_rng(6)
        mu, lv, eps = rng.normal(size=(4, 2)), rng.normal(size=2), rng.normal(size=(4, 2))
        w = rng.normal(size=(4, 2))
        m_t, lv_t = dc.Tensor(mu, requires_grad=True), dc.Tensor(lv, requires_grad=True)
        with dc.recording() as tape:
            out = (vm.sample_latents(m_t, lv_t, eps) * w).sum()
        tape.backward(out)
        f = lambda: float(((mu + np.exp(0.5 * lv) * eps) * w).sum())
        assert rel_err(m_t.grad, central_diff(f, mu)) < 1e-6
        assert rel_err(lv_t.grad, central_diff(f, lv)) < 1e-6

    def test_noise_shape_checked(self):
        with pytest.raises(dc.ShapeError):
            vm.sample_latents(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 3)))

    def test_reconstruction(self):
        Y = np.random.default_rng(7).normal(size=(3, 2))
        assert vm.reconstruction_loss(Y, Y).item() == 0.0
        Z = Y.copy()
        Z[1, 0] += 1.0
        assert vm.reconstruction_loss(Y, Z).item() == pytest.approx(1.0, abs=1e-12)
        W = np.random.default_rng(8).normal(size=(3, 2))
        naive = sum((W[i, j] - Y[i, j]) ** 2 for i in range(3) for j in range(2))
        assert vm.reconstruction_loss(Y, W).item() == pytest.approx(naive, abs=1e-12)
        with pytest.raises(dc.ShapeError):
            vm.reconstruction_loss(Y, Y.T)

    def test_posterior_logq(self):
        assert vm.posterior_logq([[0.4]], [[0.4]], [0.0]).item() == pytest.approx(-0.5 * math.log(2 * math.pi))
        assert vm.posterior_logq([[0.4]], [[0.4]], [-math.log(2 * math.pi)]).item() == pytest.approx(0.0, abs=1e-12)
        rng = np.random.default_rng(9)
        S, mu, lv = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=2)
        once = vm.posterior_logq(S, mu, lv).item()
        twice = vm.posterior_logq(np.vstack([S, S]), np.vstack([mu, mu]), lv).item()
        assert twice == pytest.approx(2 * once, abs=1e-12)


@pytest.mark.parametrize("branch", [1, 2, 3])
class TestTotalLoss:
    def test_beta_zero_is_reconstruction(self, branch):
        model, _ = small_model(branch)
        Y = np.random.default_rng(10).normal(size=(8, 2))
        loss, parts = vm.total_loss(model, Y, 0.0, vm.step_noise(0, 0, (8, 2)))
        assert loss.item() == parts.rec

    def test_decomposition_and_determinism(self, branch):
        model, _ = small_model(branch)
        Y = np.random.default_rng(11).normal(size=(8, 2))
        eps = vm.step_noise(0, 3, (8, 2))
        _, a = vm.total_loss(model, Y, 0.3, eps)
        _, b = vm.total_loss(model, Y, 0.3, vm.step_noise(0, 3, (8, 2)))
        assert a == b
        assert abs(a.total - (a.rec + 0.3 * (a.logq - a.logp))) < 1e-9

    def test_every_parameter_matches_finite_differences(self, branch):
        model, _ = small_model(branch, flow_layers=2)
        Y = np.random.default_rng(12).normal(size=(8, 2))
        eps = vm.step_noise(1, 0, (8, 2))
        grads, _ = loss_grads(model, Y, 0.7, eps)
        f = lambda: vm.total_loss(model, Y, 0.7, eps)[0].item()
        for name, p in model.parameters().items():
            assert grads[name] is not None, name
            assert rel_err(grads[name], central_diff(f, p.value, h=1e-6)) < 1e-4, name

    def test_beta_zero_detaches_prior(self, branch):
        model, _ = small_model(branch)
        Y = np.random.default_rng(13).normal(size=(8, 2))
        grads, _ = loss_grads(model, Y, 0.0, vm.step_noise(0, 0, (8, 2)))
        for name, g in grads.items():
            if name.startswith("prior."):
                assert not np.any(g), name


class TestAdam:
    def test_zero_gradient(self):
        p = dc.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = vm.Adam()
        for _ in range(5):
            opt.step({"p": p}, {"p": np.zeros(2)})
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = dc.Tensor(np.zeros(3), requires_grad=True)
        vm.Adam(lr=1e-3).step({"p": p}, {"p": np.array([0.5, -3.0, 1e3])})
        np.testing.assert_allclose(p.value, [-1e-3, 1e-3, -1e-3], rtol=1e-6)

    def test_moments_persist(self):
        # second step with a flipped gradient is damped by the first moment
        p = dc.Tensor(np.zeros(1), requires_grad=True)
        opt = vm.Adam(lr=1.0)
        opt.step({"p": p}, {"p": np.array([1.0])})
        opt.step({"p": p}, {"p": np.array([-1.0])})
        m = (0.9 * 0.1 - 0.1) / (1 - 0.9**2)
        v = (0.999 * 0.001 + 0.001) / (1 - 0.999**2)
        assert p.value[0] == pytest.approx(-1.0 / (1.0 + 1e-8) - m / (math.sqrt(v) + 1e-8), rel=1e-12)

    def test_independent_optimizers_agree(self):
        g = np.random.default_rng(14).normal(size=(3, 2))
        outs = []
        for _ in range(2):
            p = dc.Tensor(np.ones((3, 2)), requires_grad=True)
            opt = vm.Adam()
            for k in range(3):
                opt.step({"p": p}, {"p": g * (k + 1)})
            outs.append(p.value)
        np.testing.assert_array_equal(*outs)

    def test_shape_mismatch(self):
        p = dc.Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(dc.ShapeError):
            vm.Adam().step({"p": p}, {"p": np.zeros(3)})


@pytest.fixture(scope="module")
def episode():
    specs, mixing = sg.default_scenario()
    return sg.make_episode(specs, mixing, 60, seed=2)


class TestTrain:
    def test_zero_learning_rate(self, episode):
        cfg = vm.TrainConfig(branch=3, epochs=5, lr=0.0, log_every=1)
        state, report = vm.train(episode, cfg)
        fresh = vm.build_model(2, 2, cfg)
        for name, p in state.model.parameters().items():
            np.testing.assert_array_equal(p.value, fresh.parameters()[name].value, err_msg=name)
        assert len(report.rows) == 5

    def test_rows_satisfy_decomposition(self, episode):
        cfg = vm.TrainConfig(branch=2, epochs=30, log_every=7, warmup_fraction=0.5)
        _, report = vm.train(episode, cfg)
        assert [r["epoch"] for r in report.rows] == [0, 7, 14, 21, 28, 29]
        for r in report.rows:
            assert abs(r["total"] - (r["rec"] + r["beta"] * (r["logq"] - r["logp"]))) < 1e-9
            assert all(0 <= c <= 1 for c in r["corr"])
        assert report.rows[0]["beta"] == 0.0 and report.rows[-1]["beta"] == 0.05

    def test_beta_zero_steps_leave_prior_fixed(self, episode):
        model, _ = small_model(1)
        Y = episode.observations[:, :2]
        before = {k: v.value.copy() for k, v in model.prior.tensors.items()}
        opt = vm.Adam(lr=1e-2)
        for epoch in range(5):
            grads, _ = loss_grads(model, Y, 0.0, vm.step_noise(0, epoch, (60, 2)))
            opt.step(model.parameters(), grads)
            for p in model.parameters().values():
                p.grad = None
        for k, v in model.prior.tensors.items():
            np.testing.assert_array_equal(v.value, before[k], err_msg=k)
        assert not np.array_equal(model.encoder.weights[0].value, vm.build_model(2, 2, vm.TrainConfig()).encoder.weights[0].value)

    def test_same_seed_identical(self, episode):
        cfg = vm.TrainConfig(branch=1, epochs=12, log_every=4)
        a, _ = vm.train(episode, cfg)
        b, _ = vm.train(episode, cfg)
        assert a.losses == b.losses
        assert a.model.state_dict() == b.model.state_dict()

    @pytest.mark.parametrize("branch", [1, 3])
    def test_resume_is_bit_compatible(self, episode, tmp_path, branch):
        cfg = vm.TrainConfig(branch=branch, epochs=25, log_every=5)
        full, _ = vm.train(episode, cfg)
        head, _ = vm.train(episode, cfg, stop_after=12)
        vm.save_checkpoint(tmp_path / "ck.json", head, cfg)
        tail, _ = vm.train(episode, cfg, resume=vm.load_checkpoint(tmp_path / "ck.json"))
        assert tail.losses == full.losses
        assert tail.model.state_dict() == full.model.state_dict()

    def test_divergence_is_reported(self, episode):
        cfg = vm.TrainConfig(branch=1, epochs=5, lr=1e-3)
        bad = np.array(episode.observations)
        bad[3, 0] = np.inf
        with pytest.raises(vm.TrainingDiverged) as info:
            vm.train(bad, cfg, n_sources=2)
        assert info.value.epoch == 0
        assert "encoder.W0" in info.value.state

    def test_config_validation(self):
        for kw in ({"beta": 0.0}, {"epochs": 0}, {"K": 0}, {"branch": 4}, {"decoder": "conv"}):
            with pytest.raises(ValueError):
                vm.TrainConfig(**kw)

    def test_mlp_decoder_shapes(self, episode):
        cfg = vm.TrainConfig(branch=1, epochs=2, decoder="mlp", decoder_width=7)
        state, _ = vm.train(episode, cfg)
        assert state.model.decoder.sizes == [2, 7, 2]
