"""Command-line entry point: ``pointdps <subcommand> ...``.

Every subcommand writes its outputs plus a JSON manifest recording the full
configuration, seed, timing and function-evaluation counts. Outputs other
than the manifest are byte-identical for identical arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from .core import RandomSource, format_xyz, read_xyz
from .data import ObservationSpec, atom_positions, fit_gmm, parse_pdb, simulate_observations, synth_dataset
from .diffusion import DiffusionConfig, NetArch, load_denoiser
from .diffusion.training import default_phases, phases_from_json, phases_to_json, train
from .experiments import ReconTask, run_ablation
from .likelihood import ObservationSet
from .metrics import (
    chamfer,
    emd,
    evaluate_model,
    generation_metrics,
    radius_of_gyration,
    rmsd_subsampled,
)
from .sampler import BetaRule, GuidedScoreContext, Schedule, ml_reconstruct, sample

log = logging.getLogger("pointdps")

VERSION = "0.1.0"


class UsageError(Exception):
    """Bad arguments or configuration; exits with status 2."""


# -- output helpers --------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(data) -> str:
    return json.dumps(data, indent=1, sort_keys=True) + "\n"


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_manifest(path, args, started: float, outputs, **extra) -> None:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": args.command,
        "version": VERSION,
        "config": config,
        "seed": getattr(args, "seed", None),
        "timing": {"elapsed_s": time.perf_counter() - started},
        "outputs": [str(p) for p in outputs],
    }
    manifest.update({k: _jsonable(v) for k, v in extra.items()})
    atomic_write(path, dump_json(manifest))


def write_clouds(out_dir, clouds, stem: str = "sample") -> list[Path]:
    """One xyz file per cloud, in chain-index order."""
    out_dir = Path(out_dir)
    paths = []
    for i, cloud in enumerate(clouds):
        p = out_dir / f"{stem}_{i:03d}.xyz"
        atomic_write(p, format_xyz(cloud))
        paths.append(p)
    return paths


def resolve_threads(value) -> int:
    if value is None:
        env = os.environ.get("POINTDPS_THREADS")
        if not env:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"POINTDPS_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise UsageError("--threads must be at least 1")
    return value


def load_cloud_files(items) -> tuple[list[Path], list[np.ndarray]]:
    """Expand files and directories (all ``*.xyz`` inside, sorted) into clouds."""
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += sorted(p.glob("*.xyz"))
        else:
            paths.append(p)
    if not paths:
        raise UsageError("no cloud files given")
    return paths, [read_xyz(p) for p in paths]


def load_dataset(spec: str, count: int, n_points: int, seed: int) -> np.ndarray:
    if spec.startswith("synth:"):
        return synth_dataset(spec.split(":", 1)[1], count, n_points, RandomSource(seed, 1))
    p = Path(spec)
    if p.suffix == ".npy":
        data = np.load(p)
    elif p.is_dir():
        _, clouds = load_cloud_files([p])
        data = np.stack(clouds)
    else:
        raise UsageError(f"dataset must be synth:KIND, a .npy file or a directory of .xyz files: {spec}")
    if data.ndim != 3 or data.shape[2] != 3:
        raise UsageError(f"dataset has shape {data.shape}, expected (count, points, 3)")
    return data


def parse_beta(text: str) -> BetaRule:
    try:
        return BetaRule.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# -- subcommands ----------------------------------------------------------------


def cmd_train(args) -> None:
    started = time.perf_counter()
    if args.epochs < 0:
        raise UsageError("--epochs must be nonnegative")
    data = load_dataset(args.dataset, args.count, args.points, args.seed)
    if args.phases:
        try:
            phases = phases_from_json(json.loads(Path(args.phases).read_text()))
        except (TypeError, ValueError, KeyError) as exc:
            raise UsageError(f"bad phase config {args.phases}: {exc}") from None
    else:
        phases = default_phases(args.epochs, args.batch_size, args.lr)
    try:
        cfg = DiffusionConfig(t_max=args.tmax, c_noise_scale=args.c_noise_scale)
        arch = NetArch(hidden=args.hidden, layers=args.layers, embed_dim=args.embed_dim)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    history: list[float] = []
    net = train(data, cfg, phases, rng=RandomSource(args.seed), arch=arch,
                augmentation=args.augment, history=history)
    meta = {"dataset": args.dataset, "n_clouds": len(data), "n_points": data.shape[1],
            "phases": phases_to_json(phases), "loss_history": history, "seed": args.seed}
    atomic_write(args.out, json.dumps(net.to_json(meta)))
    write_manifest(f"{args.out}.manifest.json", args, started, [args.out], final_loss=history[-1] if history else None)


def cmd_simulate(args) -> None:
    started = time.perf_counter()
    cloud = read_xyz(args.cloud)
    spec = ObservationSpec(args.projections, args.points, args.coarse, args.subunit, args.proper)
    if spec.n_projections and not spec.points_per_projection:
        raise UsageError("--projections needs --points")
    obs = simulate_observations(cloud, spec, RandomSource(args.seed))
    atomic_write(args.out, json.dumps(obs.to_json()))
    write_manifest(f"{args.out}.manifest.json", args, started, [args.out],
                   observations=[{"kind": o.kind, "points": len(o)} for o in obs])


def _schedule(args, alpha: float) -> Schedule:
    try:
        return Schedule.edm(args.steps, t_max=args.tmax, t_min=args.tmin, rho=args.rho,
                            beta=parse_beta(args.beta), alpha=alpha)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_reconstruct(args) -> None:
    started = time.perf_counter()
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    threads = resolve_threads(args.threads)
    model = load_denoiser(args.model)
    obs = ObservationSet.load(args.obs)
    sched = _schedule(args, args.alpha)
    ctx = GuidedScoreContext(model, obs, args.alpha)
    res = sample(ctx, sched, RandomSource(args.seed), args.samples, args.points, args.method, threads)
    paths = write_clouds(args.out_dir, res.clouds)
    write_manifest(Path(args.out_dir) / "manifest.json", args, started, paths,
                   nfe_per_sample=res.nfe, threads=threads, beta_rule=str(sched.beta),
                   timesteps=sched.timesteps.tolist(), final_energies=res.energies.tolist())


def cmd_sample(args) -> None:
    started = time.perf_counter()
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    threads = resolve_threads(args.threads)
    model = load_denoiser(args.model)
    sched = _schedule(args, 0.0)
    res = sample(GuidedScoreContext(model), sched, RandomSource(args.seed), args.samples, args.points,
                 args.method, threads)
    paths = write_clouds(args.out_dir, res.clouds)
    write_manifest(Path(args.out_dir) / "manifest.json", args, started, paths, nfe_per_sample=res.nfe,
                   threads=threads, beta_rule=str(sched.beta), timesteps=sched.timesteps.tolist())


def cmd_ml(args) -> None:
    started = time.perf_counter()
    if args.samples < 1 or args.steps < 0:
        raise UsageError("--samples must be positive and --steps nonnegative")
    obs = ObservationSet.load(args.obs)
    res = ml_reconstruct(obs, args.points, args.steps, args.lr, RandomSource(args.seed), args.samples)
    paths = write_clouds(args.out_dir, res.clouds)
    write_manifest(Path(args.out_dir) / "manifest.json", args, started, paths,
                   final_energies=res.energies.tolist(), initial_energies=res.initial_energies.tolist())


def cmd_evaluate(args) -> None:
    started = time.perf_counter()
    if (args.pdb is None) == (args.target_cloud is None):
        raise UsageError("give exactly one of --pdb and --target-cloud")
    paths, clouds = load_cloud_files(args.model_clouds)
    want = {"cd", "emd", "rmsd"} if args.metric == "all" else {args.metric}
    entries = []
    if args.target_cloud is not None:
        target = read_xyz(args.target_cloud)
        for p, cloud in zip(paths, clouds):
            e = {"file": str(p)}
            if "cd" in want:
                e["cd"] = chamfer(cloud, target)
            if "emd" in want:
                e["emd"] = emd(cloud, target)
            if "rmsd" in want:
                e["rmsd"] = rmsd_subsampled(target, cloud)
            entries.append(e)
    else:
        atoms = atom_positions(parse_pdb(Path(args.pdb).read_bytes()))
        for i, (p, cloud) in enumerate(zip(paths, clouds)):
            n = len(cloud)
            if n > len(atoms):
                raise ValueError(f"{p}: {n} model points but only {len(atoms)} heavy atoms")
            gen = RandomSource(args.seed, i).generator()
            sub = atoms[np.sort(gen.choice(len(atoms), n, replace=False))]
            res = evaluate_model(cloud, pdb_atoms=atoms, subsampled_target=sub, bandwidth=args.bandwidth)
            aligned = res["aligned"]
            e = {"file": str(p), "transform": res["transform"], "target_rg": radius_of_gyration(sub)}
            if "cd" in want:
                e["cd"] = chamfer(aligned, sub)
            if "emd" in want:
                e["emd"] = emd(aligned, sub)
            if "rmsd" in want:
                e["rmsd_atomic"] = res["rmsd_atomic"]
                e["rmsd_subsampled"] = res["rmsd_subsampled"]
            entries.append(e)
    metric_keys = sorted({k for e in entries for k in e if k not in ("file", "transform", "target_rg")})
    summary = {k: float(np.mean([e[k] for e in entries])) for k in metric_keys}
    atomic_write(args.out, dump_json({"samples": entries, "mean": summary}))
    write_manifest(f"{args.out}.manifest.json", args, started, [args.out])


def cmd_fit_gmm(args) -> None:
    started = time.perf_counter()
    if (args.pdb is None) == (args.cloud is None):
        raise UsageError("give exactly one of --pdb and --cloud")
    pts = atom_positions(parse_pdb(Path(args.pdb).read_bytes())) if args.pdb else read_xyz(args.cloud)
    if args.k < 1:
        raise UsageError("-k must be positive")
    gmm = fit_gmm(pts, args.k, RandomSource(args.seed).generator(), max_iter=args.max_iter)
    atomic_write(args.out, format_xyz(gmm.means))
    write_manifest(f"{args.out}.manifest.json", args, started, [args.out],
                   weights=gmm.weights.tolist(), covariance=gmm.covariance.tolist(),
                   em_iterations=len(gmm.log_likelihoods), log_likelihood=gmm.log_likelihoods[-1])


def cmd_parse_pdb(args) -> None:
    started = time.perf_counter()
    atoms = parse_pdb(Path(args.pdb).read_bytes())
    pts = atom_positions(atoms)
    if args.subsample:
        if args.subsample > len(pts):
            raise ValueError(f"cannot subsample {args.subsample} of {len(pts)} heavy atoms")
        gen = RandomSource(args.seed).generator()
        pts = pts[np.sort(gen.choice(len(pts), args.subsample, replace=False))]
    atomic_write(args.out, format_xyz(pts))
    write_manifest(f"{args.out}.manifest.json", args, started, [args.out], n_atoms=len(atoms),
                   radius_of_gyration=radius_of_gyration(pts))


def cmd_genmetrics(args) -> None:
    started = time.perf_counter()
    _, samples = load_cloud_files(args.samples)
    _, refs = load_cloud_files(args.refs)
    try:
        s, r = np.stack(samples), np.stack(refs)
    except ValueError:
        raise ValueError("all clouds must have the same number of points") from None
    report = generation_metrics(s, r)
    atomic_write(args.out, dump_json(report.to_json()))
    write_manifest(f"{args.out}.manifest.json", args, started, [args.out])


def cmd_ablate(args) -> None:
    started = time.perf_counter()
    model = load_denoiser(args.model)
    targets = load_dataset(args.dataset, args.count, args.points, args.seed + 1)
    parse_beta(args.beta)
    spec = ObservationSpec(args.projections, args.proj_points, args.coarse, args.subunit)
    task = ReconTask("ablation", spec, args.alpha, args.beta)
    rows = run_ablation(model, targets, task, args.samples, args.seed, args.steps, args.tmax, args.rho)
    atomic_write(args.out, dump_json(rows))
    write_manifest(f"{args.out}.manifest.json", args, started, [args.out],
                   nfe_per_sample={k: v["nfe"] for k, v in rows.items()})


# -- parser ---------------------------------------------------------------------


def _add_schedule_flags(p, steps: int, tmax: float, beta: str) -> None:
    p.add_argument("--steps", type=int, default=steps, help=f"time steps N (default {steps})")
    p.add_argument("--rho", type=float, default=3.0, help="timestep exponent (default 3)")
    p.add_argument("--tmax", type=float, default=tmax, help=f"initial noise level (default {tmax:g})")
    p.add_argument("--tmin", type=float, default=0.002, help="smallest nonzero time (default 0.002)")
    p.add_argument("--beta", default=beta,
                   help=f"noise rule EXPR[@THRESHOLD[:BELOW]], EXPR is 1/t or a number (default {beta})")
    p.add_argument("--method", choices=["heun", "euler"], default="heun")
    p.add_argument("--threads", type=int, default=None, help="worker threads (env POINTDPS_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointdps", description="Diffusion posterior sampling for point clouds.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a point denoiser")
    p.add_argument("--dataset", required=True, help="synth:KIND, a .npy stack, or a directory of .xyz clouds")
    p.add_argument("--count", type=int, default=1000, help="clouds drawn for synth datasets")
    p.add_argument("--points", type=int, default=128, help="points per cloud for synth datasets")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--phases", help="JSON list of training phases overriding --epochs/--batch-size/--lr")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--tmax", type=float, default=80.0)
    p.add_argument("--c-noise-scale", type=float, default=12.5, help="time embedding input is scale * t")
    p.add_argument("--augment", choices=["none", "orthogonal", "proper"], default="proper")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="simulate sparse observations of a cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--projections", type=int, default=0)
    p.add_argument("--points", type=int, default=0, help="points per projection")
    p.add_argument("--coarse", type=int, default=None, help="GMM components of the coarse observation")
    p.add_argument("--subunit", type=int, default=None, help="approximate subunit size")
    p.add_argument("--proper", action="store_true", help="use rotations only (no reflections)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="guided posterior sampling")
    p.add_argument("--model", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--alpha", type=float, default=1000.0, help="guidance strength")
    _add_schedule_flags(p, 40, 1.0, "1/t")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sample", help="unconditional sampling")
    p.add_argument("--model", required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--points", type=int, default=1024)
    _add_schedule_flags(p, 100, 80.0, "1/t")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("ml", help="maximum-likelihood baseline")
    p.add_argument("--obs", required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ml)

    p = sub.add_parser("evaluate", help="CD/EMD/RMSD of reconstructions")
    p.add_argument("--model-clouds", nargs="+", required=True, help="xyz files or directories")
    p.add_argument("--pdb")
    p.add_argument("--target-cloud")
    p.add_argument("--metric", choices=["cd", "emd", "rmsd", "all"], default="all")
    p.add_argument("--bandwidth", type=float, default=None, help="alignment kernel width (default 0.1 Rg)")
    p.add_argument("--seed", type=int, default=0, help="seed for the atom subsample")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fit-gmm", help="coarse-grain a structure by GMM means")
    p.add_argument("--pdb")
    p.add_argument("--cloud")
    p.add_argument("-k", type=int, required=True)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_gmm)

    p = sub.add_parser("parse-pdb", help="extract heavy-atom coordinates")
    p.add_argument("--pdb", required=True)
    p.add_argument("--subsample", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_parse_pdb)

    p = sub.add_parser("genmetrics", help="1-NNA, COV and MMD of generated clouds")
    p.add_argument("--samples", nargs="+", required=True)
    p.add_argument("--refs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_genmetrics)

    p = sub.add_parser("ablate", help="sampler ablation at matched function evaluations")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", default="synth:blobs")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--points", type=int, default=128)
    p.add_argument("--projections", type=int, default=2)
    p.add_argument("--proj-points", type=int, default=25)
    p.add_argument("--coarse", type=int, default=None)
    p.add_argument("--subunit", type=int, default=32)
    p.add_argument("--alpha", type=float, default=300.0)
    p.add_argument("--beta", default="1/t@0.15")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--tmax", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=3.0)
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pointdps {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"pointdps {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
