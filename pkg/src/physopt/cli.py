"""Command-line interface: ``physopt <command> [--config FILE] [--set key=value ...]``.

Commands write every output under the config's ``output_dir`` together with
the resolved ``config.yaml`` and a ``manifest.json`` of sha256 hashes.
Existing outputs are never overwritten without ``--force``.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O
error.  ``PHYSOPT_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OTHER = 0, 2, 3, 4, 1
THREADS_ENV = "PHYSOPT_THREADS"


class OutputExistsError(OSError):
    pass


# ------------------------------------------------------------- plumbing


class RunDir:
    """Write-once output directory that records a hash manifest."""

    def __init__(self, root, command, force=False):
        self.root = Path(root)
        self.command = command
        self.force = force
        self.files = []

    def path(self, name) -> Path:
        p = self.root / name
        if p.exists() and not self.force:
            raise OutputExistsError(f"{p} exists (use --force to overwrite)")
        self.root.mkdir(parents=True, exist_ok=True)
        self.files.append(name)
        return p

    def finish(self, cfg_text):
        self.path("config.yaml").write_text(cfg_text)
        digests = {}
        for name in sorted(set(self.files)):
            digests[name] = hashlib.sha256((self.root / name).read_bytes()).hexdigest()
        manifest = self.root / "manifest.json"
        if manifest.exists() and not self.force:
            raise OutputExistsError(f"{manifest} exists (use --force to overwrite)")
        manifest.write_text(json.dumps({"command": self.command, "files": digests}, indent=2, sort_keys=True) + "\n")


def _cfg_text(cfg):
    from .config import dump_config
    return dump_config(cfg)


def _basis_specs(cfg):
    from .basis import BasisSpec
    try:
        return BasisSpec.from_dict(cfg["basis"]), BasisSpec.from_dict(cfg["basis_t"])
    except TypeError as exc:
        from .errors import ConfigError
        raise ConfigError(f"invalid basis section: {exc}") from None


def _solver_config(cfg):
    from .solver import SolverConfig
    return SolverConfig(seed=cfg["seed"], **cfg["solver"])


def _train_config(cfg):
    from .solver import TrainConfig
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def _load_dataset(cfg):
    from .dataset import generate_dataset, read_dataset
    from .errors import ConfigError
    path = cfg["dataset"]["path"]
    if path is None:
        ds = generate_dataset(cfg["family"], cfg["dataset"]["n"], cfg["seed"],
                              train_fraction=cfg["dataset"]["train_fraction"])
    else:
        ds = read_dataset(path)
    if ds.family != cfg["family"]:
        raise ConfigError(f"dataset family {ds.family!r} differs from config family {cfg['family']!r}")
    return ds


def _net_basis(net, axes):
    """Rebuild the basis a checkpoint was trained with."""
    from .basis import BasisSpec
    from .solver import family_basis
    meta = net.meta
    spec_x = BasisSpec.from_dict(meta["basis"])
    spec_t = BasisSpec.from_dict(meta["basis_t"]) if meta.get("basis_t") else None
    return family_basis(meta["family"], spec_x, axes, spec_t)


def _net_solver(net, cfg):
    from .solver import SolverConfig
    stored = net.meta.get("solver")
    return SolverConfig(**stored) if stored else _solver_config(cfg)


def _load_net(cfg):
    from .errors import ConfigError
    from .nnet import load_checkpoint
    path = cfg["model"]["checkpoint"]
    if path is None:
        raise ConfigError("model.checkpoint is required for this command")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _fmt(v):
    return repr(float(v))


# ------------------------------------------------------------- commands


def cmd_generate(cfg, run: RunDir, args):
    from .dataset import generate_dataset, write_dataset
    ds = generate_dataset(cfg["family"], cfg["dataset"]["n"], cfg["seed"],
                          train_fraction=cfg["dataset"]["train_fraction"])
    name = args.out or "dataset.ndjson"
    write_dataset(run.path(name), ds)
    print(f"wrote {len(ds)} records ({len(ds.train)} train / {len(ds.test)} test), "
          f"family={ds.family} seed={ds.seed} -> {run.root / name}")


def cmd_train(cfg, run: RunDir, args):
    from . import nnet, solver
    ds = _load_dataset(cfg)
    spec_x, spec_t = _basis_specs(cfg)
    basis = solver.family_basis(cfg["family"], spec_x, ds.axes, spec_t)
    scfg, tcfg = _solver_config(cfg), _train_config(cfg)
    m = cfg["model"]
    arch_kwargs = {"width": m["width"], "modes": m["modes"], "depth": m["depth"]} if m["arch"] == "fno" else {}
    net0 = solver.make_conditioner(cfg["family"], ds.train, basis, scfg, arch=m["arch"],
                                   input_spec=m["inputs"], seed=cfg["seed"],
                                   grad_transform=m["grad_transform"], scale_mode=m["scale_mode"],
                                   gamma_fourier=m["gamma_fourier"], **arch_kwargs)
    net0.meta["basis"] = spec_x.to_dict()
    net0.meta["basis_t"] = spec_t.to_dict() if cfg["family"] == "nlrd" else None
    net0.meta["solver"] = solver.config_dict(scfg)
    print(f"training {net0.n_params} parameters on {len(ds.train)} instances", flush=True)
    net, hist = solver.train(ds, net0, basis, scfg, tcfg, log=lambda s: print(s, flush=True))
    nnet.save_checkpoint(run.path("model.ckpt"), net)
    solver.write_history_csv(run.path("history.csv"), hist)
    if hist.test_rmse:
        print(f"final test relative MSE {hist.test_rmse[-1]:.4e}")


def _read_instance(path, family):
    from .dataset import default_axes
    from .errors import ConfigError
    from .pde import PdeInstance
    try:
        data = json.loads(Path(path).read_text())
    except ValueError as exc:
        raise ConfigError(f"instance file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict) or "params" not in data:
        raise ConfigError("instance JSON needs at least 'params'")
    data.setdefault("family", family)
    data.setdefault("bc", {})
    axes = data.get("axes") or default_axes(data["family"])
    return PdeInstance.from_dict(data, axes=tuple(axes))


def cmd_infer(cfg, run: RunDir, args):
    from . import solver
    from .errors import ConfigError
    path = args.instance or cfg["infer"]["instance"]
    if path is None:
        raise ConfigError("infer needs --instance (or infer.instance)")
    net = _load_net(cfg)
    inst = _read_instance(path, net.meta.get("family", cfg["family"]))
    basis = _net_basis(net, inst.axes)
    scfg = _net_solver(net, cfg)
    theta, trace = solver.infer(net, inst, basis, scfg)
    u = basis.reconstruct(theta)
    with run.path("solution.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        pts = inst.points
        if pts.ndim == 1:
            w.writerow(["x", "u"])
            w.writerows([[_fmt(x), _fmt(v)] for x, v in zip(pts, u)])
        else:
            w.writerow(["x", "t", "u"])
            w.writerows([[_fmt(p[0]), _fmt(p[1]), _fmt(v)] for p, v in zip(pts, u)])
    solver.write_trace_csv(run.path("trace.csv"), trace)
    print(f"L_PDE {trace[0]:.4e} -> {trace[-1]:.4e} in {len(trace) - 1} steps")


def cmd_bench_baselines(cfg, run: RunDir, args):
    import numpy as np

    from . import bench, solver
    net = _load_net(cfg)
    ds = _load_dataset(cfg)
    pairs = ds.test[:cfg["bench"]["n_instances"]]
    if not pairs:
        from .errors import ConfigError
        raise ConfigError("dataset has no test instances to benchmark")
    instances = [p[0] for p in pairs]
    refs = np.stack([p[1].values for p in pairs])
    basis = _net_basis(net, ds.axes)
    scfg = _net_solver(net, cfg)
    lcfg = scfg.loss_config()
    steps = cfg["bench"]["steps"]
    every = max(1, cfg["bench"]["record_every"])
    record = range(0, steps + 1, every)
    traces = []
    _, trace = solver.infer_batch(net, instances, basis, scfg)
    iter_err = _learned_iterate_errors(net, instances, basis, scfg, refs)
    traces.append(bench.OptimizerTrace("learned", np.arange(scfg.L + 1), trace, iter_err))
    for name in cfg["bench"]["optimizers"]:
        print(f"running {name} for {steps} steps", flush=True)
        if name == "lbfgs":
            traces.append(bench.run_lbfgs(instances, basis, refs, steps, record=record, cfg=lcfg))
        else:
            lr = cfg["bench"]["adam_lr"] if name == "adam" else cfg["bench"]["sgd_lr"]
            traces.append(bench.run_first_order(name, instances, basis, refs, steps, lr=lr,
                                                record=record, cfg=lcfg))
    bench.write_traces_csv(run.path("traces.csv"), traces)
    with run.path("summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["optimizer", "steps", "mean_l_pde", "mean_relative_mse"])
        for tr in traces:
            w.writerow([tr.name, int(tr.steps[-1]), _fmt(np.mean(tr.l_pde[:, -1])),
                        _fmt(np.mean(tr.rel_mse[:, -1]))])
            print(f"{tr.name:8s} steps {int(tr.steps[-1]):6d}  L_PDE {np.mean(tr.l_pde[:, -1]):.3e}  "
                  f"rel. MSE {np.mean(tr.rel_mse[:, -1]):.3e}")


def _learned_iterate_errors(net, instances, basis, scfg, refs):
    import numpy as np

    from .solver import iterates_batch
    errs = []
    for theta in iterates_batch(net, instances, basis, scfg):
        pred = theta @ basis.values.T
        errs.append(np.sum((pred - refs) ** 2, axis=1) / np.sum(refs * refs, axis=1))
    return np.stack(errs, axis=1)


def cmd_bench_conditioning(cfg, run: RunDir, args):
    from . import theory
    c = cfg["conditioning"]
    reports = theory.conditioning_sweep(c["K"], eps_list=c["eps"], lam=c["lambda_bc"], c=c["c"],
                                        seed=cfg["seed"], cap=c["cap"])
    theory.write_conditioning_csv(run.path("conditioning.csv"), reports)
    for k, rep in reports:
        counts = ", ".join(f"N({e:g})={rep.step_counts[e]}" for e in c["eps"])
        print(f"K={k:3d}  kappa={rep.kappa:.4e}  {counts}")


def cmd_landscape(cfg, run: RunDir, args):
    import numpy as np

    from . import solver, theory
    from .pde import assemble_linear_system
    ds = _load_dataset(cfg)
    lc = cfg["landscape"]
    pool = ds.test or ds.train
    if not pool:
        from .errors import ConfigError
        raise ConfigError("dataset is empty")
    idx = lc["instance_index"]
    if idx >= len(pool):
        from .errors import ConfigError
        raise ConfigError(f"landscape.instance_index {idx} out of range ({len(pool)} instances)")
    inst, ref = pool[idx]
    trajectories = {}
    if cfg["model"]["checkpoint"] is not None:
        net = _load_net(cfg)
        basis = _net_basis(net, ds.axes)
        scfg = _net_solver(net, cfg)
        iterates = _learned_iterates(net, inst, basis, scfg)
        anchor, companion = iterates[-1], iterates[0]
        trajectories["learned"] = np.array(iterates)
    else:
        spec_x, spec_t = _basis_specs(cfg)
        basis = solver.family_basis(cfg["family"], spec_x, ds.axes, spec_t)
        scfg = _solver_config(cfg)
        if cfg["family"] == "nlrd":
            from .errors import ConfigError
            raise ConfigError("nlrd landscapes need a trained checkpoint to define the anchor")
        anchor = assemble_linear_system(inst, basis, scfg.loss_config()).solve()
        companion = scfg.theta0(1, basis.n_basis)[0]
        if np.array_equal(anchor, companion):
            companion = None
    if lc["basis"] == "gram_schmidt" and companion is None:
        from .errors import ConfigError
        raise ConfigError("gram_schmidt plane needs distinct anchor and start points")
    sl = theory.landscape_slice(inst, basis, anchor, companion, loss=lc["loss"], directions=lc["basis"],
                                res=lc["res"], extent=lc["extent"], seed=cfg["seed"],
                                trajectories=trajectories, reference=ref, cfg=scfg.loss_config())
    theory.write_landscape_csv(run.path("landscape.csv"), sl)
    j, i = np.unravel_index(np.argmin(sl.values), sl.values.shape)
    print(f"grid {lc['res']}x{lc['res']}, minimum at (alpha, beta) = ({sl.alpha[i]:.3e}, {sl.beta[j]:.3e})")


def _learned_iterates(net, inst, basis, scfg):
    from .solver import iterates_batch
    return [theta[0] for theta in iterates_batch(net, [inst], basis, scfg)]


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "bench-baselines": cmd_bench_baselines,
    "bench-conditioning": cmd_bench_conditioning,
    "landscape": cmd_landscape,
}


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="physopt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set solver.L=5")
        sp.add_argument("--out-dir", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--family", choices=["helmholtz", "poisson", "nlrd"])
        sp.add_argument("--dataset", help="dataset .ndjson file (default: generate in memory)")
        sp.add_argument("--checkpoint", help="trained conditioner checkpoint")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return sp

    g = common(sub.add_parser("generate", help="sample instances and reference solutions"))
    g.add_argument("--n", type=int, help="number of instances")
    g.add_argument("--out", help="dataset file name inside the output directory")
    common(sub.add_parser("train", help="train the conditioner network"))
    i = common(sub.add_parser("infer", help="run the learned solver on one instance"))
    i.add_argument("--instance", help="instance JSON: {family, params, bc[, axes]}")
    b = common(sub.add_parser("bench-baselines", help="compare with SGD, Adam and L-BFGS"))
    b.add_argument("--steps", type=int)
    c = common(sub.add_parser("bench-conditioning", help="condition numbers and GD step counts"))
    c.add_argument("--K", help="comma-separated maximal frequencies, e.g. 4,8,16")
    c.add_argument("--eps", help="comma-separated tolerances")
    ls = common(sub.add_parser("landscape", help="2d slice of a loss landscape"))
    ls.add_argument("--loss", choices=["pde", "data"])
    ls.add_argument("--basis", choices=["hessian", "gram_schmidt"])
    ls.add_argument("--res", type=int)
    return p


def _csv_list(text, cast):
    from .errors import ConfigError
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def _flag_updates(args) -> dict:
    up = {}
    if args.seed is not None:
        up["seed"] = args.seed
    if args.family is not None:
        up["family"] = args.family
    if args.out_dir is not None:
        up["output_dir"] = args.out_dir
    if args.dataset is not None:
        up.setdefault("dataset", {})["path"] = args.dataset
    if args.checkpoint is not None:
        up.setdefault("model", {})["checkpoint"] = args.checkpoint
    if getattr(args, "n", None) is not None:
        up.setdefault("dataset", {})["n"] = args.n
    if getattr(args, "steps", None) is not None:
        up.setdefault("bench", {})["steps"] = args.steps
    if getattr(args, "K", None) is not None:
        up.setdefault("conditioning", {})["K"] = _csv_list(args.K, int)
    if getattr(args, "eps", None) is not None:
        up.setdefault("conditioning", {})["eps"] = _csv_list(args.eps, float)
    for key in ("loss", "basis", "res"):
        if getattr(args, key, None) is not None:
            up.setdefault("landscape", {})[key] = getattr(args, key)
    return up


def _limit_threads():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    from .errors import ConfigError
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from .config import load_config
        from .errors import (CheckpointError, ConfigError, DatasetFormatError, DivergenceError,
                             InvalidSpecError, PhysoptError, UnsupportedFamilyError)
    except ImportError as exc:  # pragma: no cover
        print(f"physopt: {exc}", file=sys.stderr)
        return EXIT_OTHER
    try:
        limiter = _limit_threads()
        cfg = load_config(args.config, overrides=args.set, updates=_flag_updates(args))
        run = RunDir(cfg["output_dir"], args.command, force=args.force)
        COMMANDS[args.command](cfg, run, args)
        run.finish(_cfg_text(cfg))
        if limiter is not None:
            limiter.unregister()
        return EXIT_OK
    except (ConfigError, InvalidSpecError, UnsupportedFamilyError) as exc:
        print(f"physopt {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"physopt {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DatasetFormatError, CheckpointError) as exc:
        print(f"physopt {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PhysoptError as exc:
        print(f"physopt {args.command}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
