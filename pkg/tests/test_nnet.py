import numpy as np
import pytest

from physopt import nnet, solver
from physopt.basis import BasisSpec
from physopt.dataset import generate_dataset
from physopt.errors import CheckpointError, DivergenceError, InvalidSpecError, ShapeMismatchError
from physopt.pde import problem_batch
from physopt.tape import Tape


def oracle_dft(x):
    n = len(x)
    j, k = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.exp(-2j * np.pi * j * k / n) @ x / np.sqrt(n)


class TestTransforms:
    @pytest.mark.parametrize("n", [1, 2, 8, 12, 32])
    def test_matches_dense_oracle(self, n):
        x = np.random.default_rng(n).normal(size=n) + 1j * np.random.default_rng(n + 1).normal(size=n)
        np.testing.assert_allclose(nnet.dft_1d(x), oracle_dft(x), atol=1e-12)

    @pytest.mark.parametrize("n", [8, 9, 32])
    def test_round_trip_and_parseval(self, n):
        x = np.random.default_rng(0).normal(size=n)
        spec = nnet.dft_1d(x)
        np.testing.assert_allclose(nnet.idft_1d(spec).real, x, atol=1e-12)
        assert np.sum(np.abs(spec) ** 2) == pytest.approx(np.sum(x**2))

    def test_radix2_rejects_odd_length(self):
        with pytest.raises(InvalidSpecError):
            nnet.dft_1d(np.ones(6), method="radix2")

    def test_empty_input(self):
        with pytest.raises(ShapeMismatchError):
            nnet.dft_1d(np.array([]))

    @pytest.mark.parametrize("n,modes", [(32, 1), (32, 16), (32, 17), (9, 5)])
    def test_spectral_matrices_against_oracle(self, n, modes):
        fr, fi, ir, ii = nnet.spectral_matrices(n, modes)
        x = np.random.default_rng(3).normal(size=n)
        full = oracle_dft(x)[:modes]
        np.testing.assert_allclose(x @ fr + 1j * (x @ fi), full, atol=1e-12)
        # all modes kept: the inverse reproduces the signal
        if modes == n // 2 + 1:
            np.testing.assert_allclose((x @ fr) @ ir + (x @ fi) @ ii, x, atol=1e-12)

    def test_single_mode_keeps_mean(self):
        fr, fi, ir, ii = nnet.spectral_matrices(16, 1)
        x = np.random.default_rng(4).normal(size=16)
        np.testing.assert_allclose((x @ fr) @ ir + (x @ fi) @ ii, np.full(16, x.mean()), atol=1e-12)

    @pytest.mark.parametrize("modes", [0, 18])
    def test_mode_bounds(self, modes):
        with pytest.raises(InvalidSpecError):
            nnet.spectral_matrices(32, modes)


def fd_check(fn, x, upstream_grad, rng, n=8, h=1e-6):
    idx = rng.choice(x.size, size=min(n, x.size), replace=False)
    worst = 0.0
    for i in idx:
        e = np.zeros(x.size)
        e[i] = h
        fd = (fn(x + e.reshape(x.shape)) - fn(x - e.reshape(x.shape))) / (2 * h)
        worst = max(worst, abs(fd - upstream_grad.ravel()[i]))
    return worst / max(np.max(np.abs(upstream_grad)), 1e-30)


class TestLayerAdjoints:
    def test_spectral_conv_vjp(self):
        rng = np.random.default_rng(0)
        mats = nnet.spectral_matrices(12, 4)
        x = rng.normal(size=(2, 3, 12))
        wr, wi = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 3, 5))
        w = rng.normal(size=(2, 5, 12))

        def value(xv, wrv, wiv):
            return float(np.sum(w * nnet.spectral_conv(Tape(), xv, wrv, wiv, mats).value))

        tape = Tape()
        xs, ws_r, ws_i = tape.leaf(x, "x"), tape.leaf(wr, "wr"), tape.leaf(wi, "wi")
        out = nnet.spectral_conv(tape, xs, ws_r, ws_i, mats)
        tape.backward(tape.sum(tape.mul(out, w)))
        assert fd_check(lambda v: value(v, wr, wi), x, tape.grad_of("x"), rng) < 1e-7
        assert fd_check(lambda v: value(x, v, wi), wr, tape.grad_of("wr"), rng) < 1e-7
        assert fd_check(lambda v: value(x, wr, v), wi, tape.grad_of("wi"), rng) < 1e-7

    def test_spectral_conv_is_linear(self):
        rng = np.random.default_rng(1)
        mats = nnet.spectral_matrices(16, 5)
        wr, wi = rng.normal(size=(5, 2, 2)), rng.normal(size=(5, 2, 2))
        a, b = rng.normal(size=(1, 2, 16)), rng.normal(size=(1, 2, 16))
        conv = lambda v: nnet.spectral_conv(Tape(), v, wr, wi, mats).value  # noqa: E731
        np.testing.assert_allclose(conv(2 * a - 3 * b), 2 * conv(a) - 3 * conv(b), atol=1e-12)

    def test_normalized_gradient_vjp(self):
        rng = np.random.default_rng(2)
        g = rng.normal(size=(3, 10)) * 7.0
        w = rng.normal(size=(3, 2, 10))
        tape = Tape()
        gv = tape.leaf(g, "g")
        tape.backward(tape.sum(tape.mul(nnet.normalized_gradient(tape, gv), w)))
        fn = lambda v: float(np.sum(w * nnet.normalized_gradient(Tape(), v).value))  # noqa: E731
        assert fd_check(fn, g, tape.grad_of("g"), rng, n=12) < 1e-6


class TestNetworks:
    def test_default_fno_size(self):
        net = nnet.build_fno(32, 7)
        assert 3e5 < net.n_params < 5e5
        assert net.n_channels == 7

    def test_modes_clipped_to_grid(self):
        net = nnet.build_fno(8, 2, width=4, modes=16, depth=1)
        assert net.layers[1]["modes"] == 5

    def test_identity_net(self):
        net = nnet.build_identity(10)
        g = np.random.default_rng(0).normal(size=(4, 10))
        np.testing.assert_array_equal(nnet.forward(net, g), g)

    @pytest.mark.parametrize("builder", [nnet.build_fno, nnet.build_mlp])
    def test_zero_last_layer_outputs_zero(self, builder):
        net = builder(16, 3, zero_last=True)
        x = np.random.default_rng(0).normal(size=(2, 16))
        ctx = np.random.default_rng(1).normal(size=(2, 2, 16))
        assert np.all(nnet.forward(net, x, ctx) == 0.0)

    def test_single_and_batched_agree(self):
        net = nnet.build_fno(16, 2, width=8, modes=4, seed=3)
        g = np.random.default_rng(5).normal(size=(3, 16))
        ctx = np.random.default_rng(6).normal(size=(3, 1, 16))
        batch = nnet.forward(net, g, ctx)
        np.testing.assert_allclose(nnet.forward(net, g[1], ctx[1]), batch[1], atol=1e-13)

    def test_seeded_initialisation(self):
        a, b = nnet.build_fno(16, 2, seed=4), nnet.build_fno(16, 2, seed=4)
        np.testing.assert_array_equal(a.params, b.params)
        assert not np.array_equal(a.params, nnet.build_fno(16, 2, seed=5).params)

    def test_channel_mismatch(self):
        net = nnet.build_fno(16, 3, width=4, modes=2)
        with pytest.raises(ShapeMismatchError):
            nnet.forward(net, np.zeros((1, 16)), np.zeros((1, 1, 16)))

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            nnet.forward(nnet.build_identity(8), np.zeros(9))

    def test_non_finite_input(self):
        with pytest.raises(DivergenceError):
            nnet.forward(nnet.build_identity(4), np.array([0.0, np.inf, 0.0, 0.0]))

    def test_parameter_count_checked(self):
        with pytest.raises(ShapeMismatchError):
            nnet.ConditionerNet(layers=[{"type": "dense", "in": 2, "out": 2}], input_spec={}, n_basis=2,
                                params=np.zeros(5))


def unrolled_setup(family, L, seed=0):
    ds = generate_dataset(family, 5, seed=seed, train_fraction=1.0)
    pairs = ds.train[:3]
    basis = solver.family_basis(family, BasisSpec(n_terms=10), ds.axes)
    scfg = solver.SolverConfig(L=L)
    net = solver.make_conditioner(family, pairs, basis, scfg, width=6, modes=3, depth=2, seed=seed)
    # perturb away from the initialisation so every layer matters
    net.params += np.random.default_rng(seed).normal(0, 0.02, net.n_params)
    problem = problem_batch([p[0] for p in pairs], basis, scfg.loss_config())
    context = solver.context_channels(net, [p[0] for p in pairs], basis)
    targets = np.stack([p[1].values for p in pairs])
    return net, problem, context, targets, basis, scfg


class TestUnrolledGradient:
    @pytest.mark.parametrize("family", ["poisson", "helmholtz"])
    @pytest.mark.parametrize("L", [1, 2, 3])
    def test_rho_gradient_matches_finite_differences(self, family, L):
        net, problem, ctx, targets, basis, scfg = unrolled_setup(family, L)
        _, grad, _ = solver.data_loss_and_grad(net, problem, ctx, targets, basis, scfg)
        rng = np.random.default_rng(L)
        big = np.argsort(-np.abs(grad))[:10]
        idx = np.concatenate([big, rng.choice(net.n_params, 10, replace=False)])
        weights = net.params.copy()

        def loss_at(p):
            net.params = p
            return solver.data_loss_and_grad(net, problem, ctx, targets, basis, scfg)[0]

        worst = 0.0
        for i in idx:
            h = 1e-6 * max(1.0, abs(weights[i]))
            e = np.zeros_like(weights)
            e[i] = h
            fd = (loss_at(weights + e) - loss_at(weights - e)) / (2 * h)
            worst = max(worst, abs(fd - grad[i]) / np.max(np.abs(grad)))
        net.params = weights
        assert worst < 1e-4

    def test_first_order_truncation_drops_hessian_path(self):
        net, problem, ctx, targets, basis, scfg = unrolled_setup("poisson", 1)
        full = solver.data_loss_and_grad(net, problem, ctx, targets, basis, scfg)[1]
        trunc = solver.data_loss_and_grad(net, problem, ctx, targets, basis, scfg, second_order=False)[1]
        # with one step the gradient node sits at the fixed theta0, so nothing is dropped
        np.testing.assert_allclose(trunc, full, rtol=1e-12, atol=1e-14)
        net2, problem, ctx, targets, basis, scfg = unrolled_setup("poisson", 2)
        full = solver.data_loss_and_grad(net2, problem, ctx, targets, basis, scfg)[1]
        trunc = solver.data_loss_and_grad(net2, problem, ctx, targets, basis, scfg, second_order=False)[1]
        assert not np.allclose(trunc, full)


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        net = nnet.build_fno(16, 3, width=4, modes=3, seed=2, meta={"family": "poisson", "out_scale": 0.5})
        path = tmp_path / "net.ckpt"
        nnet.save_checkpoint(path, net)
        back = nnet.load_checkpoint(path)
        np.testing.assert_array_equal(back.params, net.params)
        assert back.layers == net.layers and back.meta == net.meta
        g = np.random.default_rng(0).normal(size=(2, 16))
        ctx = np.random.default_rng(1).normal(size=(2, 2, 16))
        np.testing.assert_array_equal(nnet.forward(back, g, ctx), nnet.forward(net, g, ctx))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            nnet.load_checkpoint(path)

    def test_truncated_weights(self, tmp_path):
        path = tmp_path / "net.ckpt"
        nnet.save_checkpoint(path, nnet.build_identity(6))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            nnet.load_checkpoint(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "net.ckpt"
        nnet.save_checkpoint(path, nnet.build_identity(3))
        raw = path.read_bytes().replace(b'"version": 1', b'"version": 7')
        path.write_bytes(raw)
        with pytest.raises(CheckpointError):
            nnet.load_checkpoint(path)
