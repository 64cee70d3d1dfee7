import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physopt.basis import BasisSpec
from physopt.dataset import (
    Dataset,
    datasets_equal,
    default_axes,
    generate_dataset,
    read_dataset,
    sample_instance,
    solve_nlrd_splitting,
    solve_poisson_fd,
    solve_reference,
    write_dataset,
)
from physopt.errors import DatasetFormatError, GenerationError, UnsupportedFamilyError
from physopt.pde import PdeInstance, analytic_solution, poisson_exact, residual_loss
from physopt.solver import family_basis


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestSampling:
    def test_helmholtz_omega_range(self):
        rng = np.random.default_rng(0)
        omegas = np.array([sample_instance("helmholtz", rng).params["omega"] for _ in range(10_000)])
        assert omegas.min() >= 0.5 and omegas.max() <= 50.0
        assert omegas.min() < 1.0 and omegas.max() > 49.5

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), family=st.sampled_from(["helmholtz", "poisson", "nlrd"]))
    def test_parameters_within_ranges(self, seed, family):
        inst = sample_instance(family, np.random.default_rng(seed))
        p = inst.params
        if family == "helmholtz":
            assert 0.5 <= p["omega"] <= 50.0
        elif family == "poisson":
            assert len(p["a"]) == 16 and np.all(np.abs(p["a"]) <= 100.0)
        else:
            assert 1.0 <= p["nu"] <= 5.0 and -5.0 <= p["rho"] <= 5.0

    @pytest.mark.parametrize("family", ["helmholtz", "poisson", "nlrd"])
    def test_same_seed_same_instance(self, family):
        a = sample_instance(family, np.random.default_rng(42))
        b = sample_instance(family, np.random.default_rng(42))
        assert a.same_as(b)

    def test_unknown_family(self):
        with pytest.raises(UnsupportedFamilyError):
            sample_instance("heat", np.random.default_rng(0))

    def test_training_grid_sizes(self):
        assert len(default_axes("helmholtz")[0]) == 64
        assert len(default_axes("poisson")[0]) == 64
        x, t = default_axes("nlrd")
        assert (len(x), len(t)) == (64, 25)


class TestReferenceSolvers:
    def test_helmholtz_uses_analytic_path(self):
        x = default_axes("helmholtz")[0]
        inst = PdeInstance("helmholtz", {"omega": 1.0}, {"u0": 1.0, "v0": 0.0}, (x,))
        sol = solve_reference(inst)
        assert sol.provenance == "analytic"
        assert np.max(np.abs(sol.values - np.cos(x))) == 0.0

    def test_poisson_linear_solution_exact(self):
        x = np.linspace(0, 1, 64)
        u = solve_poisson_fd(np.zeros(64), x, 0.0, 1.0)
        assert np.max(np.abs(u - x)) < 1e-8

    def test_poisson_second_order(self):
        inst = sample_instance("poisson", np.random.default_rng(1))
        errs = []
        for m in (65, 129, 257):
            x = np.linspace(0, 1, m)
            fine = PdeInstance("poisson", inst.params, inst.bc, (x,))
            errs.append(np.max(np.abs(solve_poisson_fd(fine.forcing, x, inst.bc["u0"], inst.bc["v0"])
                                      - poisson_exact(fine))))
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)
        assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.15)

    def test_poisson_requires_uniform_grid(self):
        with pytest.raises(GenerationError):
            solve_poisson_fd(np.zeros(4), np.array([0.0, 0.1, 0.5, 1.0]), 0.0, 0.0)

    def test_nlrd_refinement(self):
        coarse = solve_nlrd_splitting(3.0, 2.0, substeps=8)
        fine = solve_nlrd_splitting(3.0, 2.0, substeps=16)
        assert np.linalg.norm(coarse - fine) / np.linalg.norm(fine) < 1e-3

    def test_nlrd_initial_row_and_bounds(self):
        sol = solve_nlrd_splitting(1.0, 5.0, nx=64, nt=11)
        x = np.arange(64) / 64
        np.testing.assert_allclose(sol[0], np.exp(-32 * (x - 0.5) ** 2))
        assert np.all(sol >= 0) and np.all(sol <= 1 + 1e-12)

    @pytest.mark.parametrize("family", ["poisson", "helmholtz"])
    def test_reference_projection_quality(self, family):
        """L_PDE of the projected reference stays within 10x that of the projected exact solution."""
        rng = np.random.default_rng(7)
        for _ in range(5):
            inst = sample_instance(family, rng)
            basis = family_basis(family, BasisSpec(n_terms=32), inst.axes)
            proj = np.linalg.pinv(basis.values)
            exact = poisson_exact(inst) if family == "poisson" else analytic_solution(inst)
            floor = residual_loss(inst, basis, proj @ exact)[0]
            ref = residual_loss(inst, basis, proj @ solve_reference(inst).values)[0]
            assert ref <= 10 * floor

    def test_nlrd_reference_shape(self):
        inst = sample_instance("nlrd", np.random.default_rng(3))
        sol = solve_reference(inst)
        assert sol.shape == (25, 64) and sol.values.size == inst.n_points


class TestDatasetFiles:
    def test_split_sizes(self):
        ds = generate_dataset("helmholtz", 20, seed=7)
        assert (len(ds.train), len(ds.test)) == (16, 4)

    def test_byte_identical_rerun(self, tmp_path):
        for name in ("a", "b"):
            write_dataset(tmp_path / f"{name}.ndjson", generate_dataset("poisson", 12, seed=7))
        assert sha(tmp_path / "a.ndjson") == sha(tmp_path / "b.ndjson")

    def test_different_seed_differs(self):
        a = generate_dataset("helmholtz", 4, seed=1)
        b = generate_dataset("helmholtz", 4, seed=2)
        assert not datasets_equal(a, b)

    def test_train_and_test_streams_independent(self):
        ds = generate_dataset("helmholtz", 10, seed=3)
        small = generate_dataset("helmholtz", 5, seed=3, train_fraction=0.8)
        # the test stream does not depend on how many training draws were made
        assert ds.test[0][0].same_as(small.test[0][0])

    @pytest.mark.parametrize("family", ["helmholtz", "poisson", "nlrd"])
    def test_round_trip(self, tmp_path, family):
        ds = generate_dataset(family, 5, seed=11)
        path = tmp_path / "ds.ndjson"
        write_dataset(path, ds)
        back = read_dataset(path)
        assert datasets_equal(ds, back)
        write_dataset(tmp_path / "again.ndjson", back)
        assert sha(path) == sha(tmp_path / "again.ndjson")

    def test_empty_dataset_header_only(self, tmp_path):
        ds = generate_dataset("poisson", 0, seed=0)
        path = tmp_path / "empty.ndjson"
        write_dataset(path, ds)
        assert len(path.read_text().splitlines()) == 1
        back = read_dataset(path)
        assert len(back) == 0 and back.family == "poisson"

    def test_record_count(self, tmp_path):
        ds = generate_dataset("helmholtz", 1000, seed=5)
        path = tmp_path / "h.ndjson"
        write_dataset(path, ds)
        assert len(path.read_text().splitlines()) == 1001
        assert (len(ds.train), len(ds.test)) == (800, 200)

    def test_malformed_record_reports_line(self, tmp_path):
        path = tmp_path / "bad.ndjson"
        write_dataset(path, generate_dataset("poisson", 3, seed=0))
        lines = path.read_text().splitlines()
        lines[2] = lines[2][:40]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError) as info:
            read_dataset(path)
        assert info.value.line == 3

    @pytest.mark.parametrize("content", ["", "not json\n", '{"schema_version": 99}\n'])
    def test_bad_header(self, tmp_path, content):
        path = tmp_path / "bad.ndjson"
        path.write_text(content)
        with pytest.raises(DatasetFormatError) as info:
            read_dataset(path)
        assert info.value.line == 1

    def test_equality_helper(self):
        ds = generate_dataset("poisson", 3, seed=0)
        other = Dataset(ds.family, ds.seed, ds.axes, ds.train[:1], ds.test)
        assert datasets_equal(ds, ds) and not datasets_equal(ds, other)
