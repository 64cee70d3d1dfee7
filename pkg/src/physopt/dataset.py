"""Reproducible datasets of PDE instances with reference solutions.

On-disk format (``.ndjson``): line 1 is a header object::

    {"schema_version": 1, "family": ..., "seed": ..., "grid": {"axes": [...]},
     "n_train": ..., "n_test": ...}

and each following line is one record::

    {"split": "train"|"test", "params": {...}, "bc": {...},
     "forcing_coeffs": [...] | null, "grid_shape": [...],
     "provenance": "analytic"|"finite_difference",
     "u": "<base64 of little-endian float64 values>"}

All instances of a file share the header grid.  Keys are sorted and floats
use Python's shortest round-trip repr, so equal datasets give equal bytes.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, GenerationError, UnsupportedFamilyError
from .pde import (
    FAMILIES,
    HELMHOLTZ,
    NLRD,
    POISSON,
    POISSON_K,
    PdeInstance,
    analytic_solution,
    nlrd_initial,
)

SCHEMA_VERSION = 1
ANALYTIC = "analytic"
FINITE_DIFFERENCE = "finite_difference"

SUBSAMPLE = 4
HELMHOLTZ_FINE = 256
POISSON_POINTS = 64
NLRD_FINE_X = 256
NLRD_FINE_T = 100


@dataclass
class SolutionField:
    values: np.ndarray
    provenance: str = ANALYTIC
    shape: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if not self.shape:
            self.shape = (self.values.size,)
        self.shape = tuple(int(s) for s in self.shape)
        if not np.all(np.isfinite(self.values)):
            raise GenerationError("solution field contains non-finite values")


@dataclass
class Dataset:
    family: str
    seed: int
    axes: tuple
    train: list = field(default_factory=list)  # [(PdeInstance, SolutionField)]
    test: list = field(default_factory=list)

    def __len__(self):
        return len(self.train) + len(self.test)

    def records(self):
        yield from (("train", inst, sol) for inst, sol in self.train)
        yield from (("test", inst, sol) for inst, sol in self.test)


def default_axes(family):
    """Training grids after the x4 subsampling of the fine reference grids."""
    if family == HELMHOLTZ:
        return (np.arange(HELMHOLTZ_FINE)[::SUBSAMPLE] / HELMHOLTZ_FINE,)
    if family == POISSON:
        return (np.linspace(0.0, 1.0, POISSON_POINTS),)
    if family == NLRD:
        x = np.arange(NLRD_FINE_X)[::SUBSAMPLE] / NLRD_FINE_X
        t = np.linspace(0.0, 1.0, NLRD_FINE_T)[::SUBSAMPLE]
        return (x, t)
    raise UnsupportedFamilyError(f"unknown family {family!r}")


def sample_instance(family, rng: np.random.Generator, axes=None) -> PdeInstance:
    """Draw one instance with the parameter distributions of the family."""
    axes = default_axes(family) if axes is None else axes
    if family == HELMHOLTZ:
        omega = rng.uniform(0.5, 50.0)
        u0, v0 = rng.normal(0.0, 1.0, size=2)
        return PdeInstance(HELMHOLTZ, {"omega": float(omega)}, {"u0": float(u0), "v0": float(v0)}, axes)
    if family == POISSON:
        a = rng.uniform(-100.0, 100.0, size=POISSON_K)
        u0, v0 = rng.normal(0.0, 1.0, size=2)
        return PdeInstance(POISSON, {"a": a}, {"u0": float(u0), "v0": float(v0)}, axes)
    if family == NLRD:
        nu = rng.uniform(1.0, 5.0)
        rho = rng.uniform(-5.0, 5.0)
        return PdeInstance(NLRD, {"nu": float(nu), "rho": float(rho)}, {}, axes)
    raise UnsupportedFamilyError(f"unknown family {family!r}")


# ---------------------------------------------------------------- solvers


def solve_poisson_fd(f, x, u0, v0):
    """March -u'' = f from x = 0 with the second-order central stencil.

    u_{j+1} = 2u_j - u_{j-1} - h^2 f_j, started with the Taylor step
    u_1 = u0 + h v0 - h^2 f_0 / 2.  Exact for linear solutions.
    """
    x = np.asarray(x, dtype=float)
    f = np.asarray(f, dtype=float)
    h = x[1] - x[0]
    if not np.allclose(np.diff(x), h, rtol=1e-10, atol=0):
        raise GenerationError("poisson FD solve requires a uniform grid")
    u = np.empty_like(x)
    u[0] = u0
    u[1] = u0 + h * v0 - 0.5 * h * h * f[0]
    for j in range(1, len(x) - 1):
        u[j + 1] = 2.0 * u[j] - u[j - 1] - h * h * f[j]
    return u


def _logistic_step(u, rho, tau):
    e = np.exp(rho * tau)
    return u * e / (1.0 - u + u * e)


def solve_nlrd_splitting(nu, rho, nx=NLRD_FINE_X, nt=NLRD_FINE_T, substeps=8):
    """Strang splitting: half logistic step, Crank--Nicolson diffusion, half logistic.

    Periodic in x on ``x_j = j / nx``; output at ``t_k = linspace(0, 1, nt)``.
    The CN step uses the 3-point Laplacian and is diagonalised by the FFT.
    Returns an ``(nt, nx)`` array.
    """
    x = np.arange(nx) / nx
    h = 1.0 / nx
    dt = 1.0 / (nt - 1) / substeps
    k = np.arange(nx)
    lap = -4.0 / h**2 * np.sin(np.pi * k / nx) ** 2
    cn = (1.0 + 0.5 * dt * nu * lap) / (1.0 - 0.5 * dt * nu * lap)
    u = nlrd_initial(x)
    out = np.empty((nt, nx))
    out[0] = u
    for n in range(1, nt):
        for _ in range(substeps):
            u = _logistic_step(u, rho, 0.5 * dt)
            u = np.fft.ifft(cn * np.fft.fft(u)).real
            u = _logistic_step(u, rho, 0.5 * dt)
        out[n] = u
    return out


def solve_reference(inst: PdeInstance, substeps=8) -> SolutionField:
    """Reference solution on the instance grid."""
    try:
        if inst.family == HELMHOLTZ:
            fine = np.arange(HELMHOLTZ_FINE) / HELMHOLTZ_FINE
            x = inst.axes[0]
            if len(x) * SUBSAMPLE == HELMHOLTZ_FINE and np.allclose(x, fine[::SUBSAMPLE]):
                vals = analytic_solution(inst, fine)[::SUBSAMPLE]
            else:
                vals = analytic_solution(inst, x)
            return SolutionField(vals, ANALYTIC)
        if inst.family == POISSON:
            vals = solve_poisson_fd(inst.forcing, inst.axes[0], inst.bc["u0"], inst.bc["v0"])
            return SolutionField(vals, FINITE_DIFFERENCE)
        if inst.family == NLRD:
            x, t = inst.axes
            full = solve_nlrd_splitting(inst.params["nu"], inst.params["rho"], substeps=substeps)
            fx = np.arange(NLRD_FINE_X) / NLRD_FINE_X
            ft = np.linspace(0.0, 1.0, NLRD_FINE_T)
            ix = np.searchsorted(fx, x - 1e-12)
            it = np.searchsorted(ft, t - 1e-12)
            if not (np.allclose(fx[ix], x) and np.allclose(ft[it], t)):
                raise GenerationError("nlrd grid is not a subgrid of the reference grid")
            vals = full[np.ix_(it, ix)]
            return SolutionField(vals.ravel(), FINITE_DIFFERENCE, shape=vals.shape)
    except GenerationError as exc:
        raise GenerationError(f"{exc}; instance={inst.to_dict(include_grid=False)}") from exc
    except FloatingPointError as exc:  # pragma: no cover - errstate not raised by default
        raise GenerationError(f"solver failed: {exc}; instance={inst.to_dict(include_grid=False)}")
    raise UnsupportedFamilyError(inst.family)


def generate_dataset(family, n, seed, train_fraction=0.8, axes=None) -> Dataset:
    """``n`` instances split train/test from independent RNG streams."""
    if family not in FAMILIES:
        raise UnsupportedFamilyError(f"unknown family {family!r}")
    axes = default_axes(family) if axes is None else tuple(np.asarray(a, float) for a in axes)
    n_train = int(round(train_fraction * n))
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    ds = Dataset(family=family, seed=int(seed), axes=axes)
    for rng, bucket, count in ((train_rng, ds.train, n_train), (test_rng, ds.test, n - n_train)):
        for _ in range(count):
            inst = sample_instance(family, rng, axes)
            bucket.append((inst, solve_reference(inst)))
    return ds


# -------------------------------------------------------------------- I/O


def _encode(values):
    return base64.b64encode(np.asarray(values, dtype="<f8").tobytes()).decode("ascii")


def _decode(text):
    return np.frombuffer(base64.b64decode(text.encode("ascii"), validate=True), dtype="<f8").astype(float)


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_dataset(path, ds: Dataset):
    path = Path(path)
    header = {
        "schema_version": SCHEMA_VERSION,
        "family": ds.family,
        "seed": ds.seed,
        "grid": {"axes": [[float(v) for v in a] for a in ds.axes]},
        "n_train": len(ds.train),
        "n_test": len(ds.test),
    }
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for split, inst, sol in ds.records():
            d = inst.to_dict(include_grid=False)
            rec = {
                "split": split,
                "params": {k: v for k, v in d["params"].items() if k != "a"},
                "bc": d["bc"],
                "forcing_coeffs": d["params"].get("a"),
                "grid_shape": list(sol.shape),
                "provenance": sol.provenance,
                "u": _encode(sol.values),
            }
            fh.write(_dumps(rec) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("empty file: missing header", line=1)
    try:
        header = json.loads(lines[0])
        if header.get("schema_version") != SCHEMA_VERSION:
            raise DatasetFormatError(f"unsupported schema_version {header.get('schema_version')!r}", line=1)
        family = header["family"]
        axes = tuple(np.asarray(a, dtype=float) for a in header["grid"]["axes"])
        ds = Dataset(family=family, seed=int(header["seed"]), axes=axes)
    except DatasetFormatError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"malformed header: {exc}", line=1) from exc
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            params = dict(rec["params"])
            if rec.get("forcing_coeffs") is not None:
                params["a"] = rec["forcing_coeffs"]
            inst = PdeInstance.from_dict(
                {"family": family, "params": params, "bc": rec["bc"]}, axes=axes)
            values = _decode(rec["u"])
            shape = tuple(rec["grid_shape"])
            if int(np.prod(shape)) != values.size or values.size != inst.n_points:
                raise ValueError(f"u has {values.size} values, grid_shape {shape}, grid {inst.n_points}")
            sol = SolutionField(values, rec["provenance"], shape=shape)
            split = rec["split"]
            if split not in ("train", "test"):
                raise ValueError(f"unknown split {split!r}")
        except (ValueError, KeyError, TypeError, GenerationError) as exc:
            raise DatasetFormatError(f"malformed record: {exc}", line=lineno) from exc
        (ds.train if split == "train" else ds.test).append((inst, sol))
    return ds


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if a.family != b.family or a.seed != b.seed or len(a.train) != len(b.train) or len(a.test) != len(b.test):
        return False
    if len(a.axes) != len(b.axes) or not all(np.array_equal(x, y) for x, y in zip(a.axes, b.axes)):
        return False
    for (ia, sa), (ib, sb) in zip(a.train + a.test, b.train + b.test):
        if not ia.same_as(ib) or not np.array_equal(sa.values, sb.values) or sa.shape != sb.shape:
            return False
        if sa.provenance != sb.provenance:
            return False
    return True
