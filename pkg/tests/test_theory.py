import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physopt import theory
from physopt.basis import BasisSpec
from physopt.dataset import sample_instance
from physopt.errors import InvalidSpecError, ShapeMismatchError
from physopt.pde import LinearSystem, assemble_linear_system
from physopt.solver import family_basis


def random_spd(n, seed, spread=100.0):
    rng = np.random.default_rng(seed)
    q = np.linalg.qr(rng.normal(size=(n, n)))[0]
    return q @ np.diag(np.geomspace(1.0, spread, n)) @ q.T


def power_oracle(a, iters=20000):
    """All eigenvalues by power iteration with Hotelling deflation."""
    n = a.shape[0]
    work = a.copy()
    vals = []
    rng = np.random.default_rng(0)
    for _ in range(n):
        v = rng.normal(size=n)
        for _ in range(iters):
            w = work @ v
            nv = np.linalg.norm(w)
            if nv == 0:
                break
            v = w / nv
        lam = v @ work @ v
        vals.append(lam)
        work = work - lam * np.outer(v, v)
    return np.sort(vals)


def system(a, b=None):
    a = np.asarray(a, dtype=float)
    return LinearSystem(A=a, b=np.zeros(len(a)) if b is None else b, c=0.0)


class TestSpectrum:
    def test_identity(self):
        rep = theory.spectrum_and_kappa(np.eye(5))
        assert rep.kappa == 1.0 and rep.n == 5

    def test_against_power_iteration(self):
        a = random_spd(8, 1, spread=20.0)
        w, _ = theory.jacobi_eigh(a)
        np.testing.assert_allclose(w, power_oracle(a), atol=1e-8)

    @settings(max_examples=25, deadline=None)
    @given(n=st.integers(2, 12), seed=st.integers(0, 10_000))
    def test_eigen_residuals(self, n, seed):
        a = np.random.default_rng(seed).normal(size=(n, n))
        a = a + a.T
        w, v = theory.jacobi_eigh(a)
        norm = np.linalg.norm(a, 2)
        for k in range(n):
            assert np.linalg.norm(a @ v[:, k] - w[k] * v[:, k]) < 1e-8 * norm
        assert np.all(np.diff(w) >= 0)

    @pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
    @pytest.mark.parametrize("k", [4, 5, 8, 16])
    def test_fourier_poisson_quartic_growth(self, k, lam):
        assert theory.spectrum_and_kappa(theory.fourier_poisson_system(k, lam)).kappa >= k**4

    def test_null_threshold(self):
        rep = theory.spectrum_and_kappa(np.diag([0.0, 1.0, 4.0]))
        assert rep.kappa == 4.0


class TestStepCounts:
    def test_identity_closed_form(self):
        sc = theory.gd_step_count(system(np.eye(4)), eps=1e-3, c=0.5)
        assert sc.steps == math.ceil(math.log(1e-3) / math.log(0.5)) == 10
        assert not sc.capped

    def test_badly_scaled_diagonal(self):
        base = theory.gd_step_count(system(np.eye(2)), eps=1e-3).steps
        slow = theory.gd_step_count(system(np.diag([1.0, 100.0])), eps=1e-3).steps
        assert 50 <= slow / base <= 200

    def test_cap_flag(self):
        sc = theory.gd_step_count(system(np.diag([1.0, 1e6])), eps=1e-6, cap=1000)
        assert sc.capped and sc.steps == 1000

    def test_bad_c(self):
        with pytest.raises(InvalidSpecError):
            theory.gd_step_count(system(np.eye(2)), c=1.5)

    def test_contraction_bound(self):
        a = random_spd(6, 3, spread=50.0)
        c = 0.5
        kappa = theory.spectrum_and_kappa(a).kappa
        eta = c / np.linalg.eigvalsh(a).max()
        e = np.random.default_rng(0).normal(size=6)
        for _ in range(200):
            nxt = e - eta * a @ e
            assert np.linalg.norm(nxt) / np.linalg.norm(e) <= 1 - c / kappa + 1e-6
            e = nxt

    def test_step_law_slope(self):
        kappas = [10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0]
        steps = []
        for kap in kappas:
            sys = system(np.diag(np.geomspace(1.0, kap, 5)))
            steps.append(theory.gd_step_count(sys, eps=1e-3, seed=1).steps)
        slope = np.polyfit(np.log(kappas), np.log(steps), 1)[0]
        assert abs(slope - 1.0) <= 0.15

    def test_fourier_ratios_track_quartic(self):
        reports = theory.conditioning_sweep([4, 8, 16], eps_list=[1e-3])
        counts = [r.step_counts[1e-3] for _, r in reports]
        for lo, hi in zip(counts, counts[1:]):
            assert 0.5 * 16 <= hi / lo <= 2 * 16


class TestLinearPreconditioner:
    def test_single_step_inverts(self):
        a = random_spd(5, 2, spread=30.0)
        systems = [system(a, b) for b in np.random.default_rng(10).normal(size=(8, 5))]
        pre = theory.train_linear_preconditioner(systems, eta=0.5, steps=1)
        np.testing.assert_allclose(pre.P, np.linalg.inv(0.5 * a), rtol=1e-6, atol=1e-8)
        assert pre.kappa_pa == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("optimizer", ["lm", "lbfgs"])
    def test_two_steps_on_fourier_poisson(self, optimizer):
        a = theory.fourier_poisson_system(4).A
        systems = [system(a, b) for b in np.random.default_rng(1).normal(size=(12, 9))]
        pre = theory.train_linear_preconditioner(systems, steps=2, optimizer=optimizer, max_iter=3000)
        assert pre.kappa_pa <= 2.0
        assert pre.spectral_radius < 1.0
        assert pre.history[-1] < pre.history[0]

    def test_nilpotency_tracks_loss(self):
        a = random_spd(4, 5, spread=10.0)
        systems = [system(a, b) for b in np.random.default_rng(2).normal(size=(6, 4))]
        rough = theory.train_linear_preconditioner(systems, steps=2, optimizer="adam", max_iter=50)
        fine = theory.train_linear_preconditioner(systems, steps=2, optimizer="lm")
        assert fine.loss < rough.loss and fine.nilpotency_norm < rough.nilpotency_norm

    def test_needs_shared_matrix(self):
        with pytest.raises(ShapeMismatchError):
            theory.train_linear_preconditioner([system(np.eye(2)), system(2 * np.eye(2))])

    def test_unknown_optimizer(self):
        with pytest.raises(InvalidSpecError):
            theory.train_linear_preconditioner([system(np.eye(2))], optimizer="newton")


def linear_landscape(family="poisson", n=12, **kwargs):
    inst = sample_instance(family, np.random.default_rng(0))
    basis = family_basis(family, BasisSpec(n_terms=n), inst.axes)
    sys = assemble_linear_system(inst, basis)
    anchor = sys.solve()
    return sys, anchor, theory.landscape_slice(inst, basis, anchor, **kwargs)


class TestLandscape:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(3, 20))
    def test_gram_schmidt_orthonormal(self, seed, n):
        rng = np.random.default_rng(seed)
        u, v = theory.gram_schmidt_plane(rng.normal(size=n), rng.normal(size=n), rng.normal(size=n))
        assert abs(u @ v) < 1e-12
        assert abs(np.linalg.norm(u) - 1) < 1e-12 and abs(np.linalg.norm(v) - 1) < 1e-12

    def test_degenerate_plane(self):
        with pytest.raises(InvalidSpecError):
            theory.gram_schmidt_plane(np.ones(3), np.ones(3), np.zeros(3))

    def test_anchor_projects_to_origin(self):
        inst = sample_instance("poisson", np.random.default_rng(0))
        basis = family_basis("poisson", BasisSpec(n_terms=12), inst.axes)
        anchor = assemble_linear_system(inst, basis).solve()
        companion = anchor + 0.1
        sl = theory.landscape_slice(inst, basis, anchor, companion, trajectories={"run": [anchor, companion]})
        np.testing.assert_allclose(sl.trajectories["run"][0], [0.0, 0.0], atol=1e-15)
        assert sl.trajectories["run"][1][0] == pytest.approx(np.linalg.norm(companion - anchor))

    @pytest.mark.parametrize("family,n", [("poisson", 8), ("poisson", 12), ("helmholtz", 32)])
    def test_hessian_slice_minimum_and_axis_ratio(self, family, n):
        sys, _, sl = linear_landscape(family, n, directions="hessian", res=41)
        j, i = np.unravel_index(np.argmin(sl.values), sl.values.shape)
        assert (j, i) == (20, 20)
        kappa = theory.spectrum_and_kappa(sys).kappa
        assert theory.level_axis_ratio(sl) == pytest.approx(np.sqrt(kappa), rel=0.2)

    def test_hessian_is_twice_the_system_matrix(self):
        inst = sample_instance("helmholtz", np.random.default_rng(1))
        basis = family_basis("helmholtz", BasisSpec(n_terms=10), inst.axes)
        sys = assemble_linear_system(inst, basis)
        h = theory.pde_hessian(inst, basis, np.zeros(10))
        np.testing.assert_allclose(h, 2 * sys.A, rtol=1e-10, atol=1e-10 * np.abs(sys.A).max())

    def test_data_loss_needs_reference(self):
        inst = sample_instance("poisson", np.random.default_rng(0))
        basis = family_basis("poisson", BasisSpec(n_terms=8), inst.axes)
        with pytest.raises(InvalidSpecError):
            theory.landscape_slice(inst, basis, np.zeros(8), np.ones(8), loss="data")

    def test_csv_layout(self, tmp_path):
        _, _, sl = linear_landscape(directions="hessian", res=5)
        path = tmp_path / "l.csv"
        theory.write_landscape_csv(path, sl)
        lines = path.read_text().splitlines()
        assert lines[0] == "kind,name,index,alpha,beta,loss" and len(lines) == 26
