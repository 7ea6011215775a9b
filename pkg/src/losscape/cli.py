"""Command-line entry point: ``losscape {train,landscape,spectrum,interpolate,bench}``.

Every JSON artifact has the shape
``{"tool", "version", "command", "config", "inputs", "result", "execution"}``.
``execution`` holds the worker count and timings. It is the only part that
changes between reruns with identical inputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (GridTask, SleepTask, SlqDataTask, SlqIterationTask, amdahl_fit, measure,
                    scaling_table, speedup_with_error)
from .directions import eigen_pair, normalize_pair, pca_directions, random_pair, user_pair
from .errors import (ConfigError, DegenerateDirectionError, LayoutError, LosscapeError,
                     RankDeficiencyError)
from .landscape import (DEFAULT_BORDER, DEFAULT_FRACTION, DEFAULT_GRID, DEFAULT_POINTS,
                        evaluate_grid, grid_ranges, interpolate_minima, project_trajectory)
from .modelzoo import (Dataset, OptimizerConfig, build_model,
                       load_checkpoint, load_dataset, load_trajectory, make_synthetic,
                       save_trajectory, train_sgd)
from .modelzoo.train import DEFAULT_BATCH, DEFAULT_LR, DEFAULT_MOMENTUM
from .spectral import (DEFAULT_K, DEFAULT_M, ExplicitOperator, HessianOperator, l1_distance,
                       slq_spectrum, smoothed_density)

log = logging.getLogger("losscape")

EXIT_MISSING = 2
EXIT_RANK = 3
EXIT_DEGENERATE = 4
EXIT_LAYOUT = 5

COMMON = {"seed": 0, "workers": 1, "out": "."}
DATA = {"data": "synth", "samples": 2560, "classes": 10, "input_hw": 8, "data_seed": 0}
SPECTRUM = {"k": DEFAULT_K, "m": DEFAULT_M, "sigma": "auto", "fraction": DEFAULT_FRACTION}

DEFAULTS = {
    "train": {**COMMON, **DATA, "out": "trajectory", "model": "lenet-mini", "width": 32,
              "lr": DEFAULT_LR, "momentum": DEFAULT_MOMENTUM, "batch_size": DEFAULT_BATCH, "epochs": 1,
              "save_every": 1},
    "landscape": {**COMMON, "trajectory": None, "dirs": "pca", "dir_files": None,
                  "grid": DEFAULT_GRID, "border": DEFAULT_BORDER, "fraction": DEFAULT_FRACTION,
                  "m": 40, "csv": True, "allow_degenerate": False},
    "spectrum": {**COMMON, **SPECTRUM, "trajectory": None, "checkpoint": None,
                 "every_checkpoint": False, "operator_file": None},
    "interpolate": {**COMMON, **SPECTRUM, "minima": None, "points": DEFAULT_POINTS,
                    "spectra": False},
    "bench": {**COMMON, **DATA, "task": "slq-iteration", "workers": "1,2,4", "repeats": 3,
              "trajectory": None, "model": "lenet-mini", "width": 32, "k": 4, "m": DEFAULT_M,
              "grid": 20, "fraction": DEFAULT_FRACTION, "sleep": 1.0},
}
# execution-only settings: kept out of the provenance config so reruns compare equal
EXECUTION_KEYS = ("workers", "out")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            # a trajectory: the manifest and checkpoints, not outputs written next to them
            for f in sorted(p.iterdir()):
                if f.name == "manifest.json" or f.suffix == ".gvck":
                    out[str(f)] = sha256_file(f)
        elif p.exists():
            out[str(p)] = sha256_file(p)
    return out


def _sigma(value):
    if value in (None, "auto"):
        return "auto"
    try:
        s = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"--sigma must be 'auto' or a number, got {value!r}") from None
    if not s > 0:
        raise ConfigError("--sigma must be positive")
    return s


def _worker_list(value) -> list:
    if isinstance(value, int):
        return [value]
    if isinstance(value, list):
        return [int(v) for v in value]
    try:
        counts = [int(v) for v in str(value).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--workers must be a comma-separated list of integers, got {value!r}") from None
    if not counts or min(counts) < 1:
        raise ConfigError("worker counts must be positive")
    return counts


def load_data(cfg: dict) -> Dataset:
    spec = cfg["data"]
    if spec == "synth":
        return make_synthetic(cfg["classes"], cfg["input_hw"] ** 2, cfg["samples"], cfg["data_seed"])
    if spec.startswith("file:"):
        path = spec[5:]
        if not Path(path).exists():
            raise FileNotFoundError(f"dataset file {path} not found")
        return load_dataset(path)
    raise ConfigError(f"--data must be 'synth' or 'file:PATH', got {spec!r}")


def model_spec_for(cfg: dict, ds: Dataset) -> dict:
    shape = ds.sample_shape
    if cfg["model"] == "mlp":
        return {"kind": "mlp", "layer_sizes": [int(np.prod(shape)), cfg["width"], ds.num_classes]}
    if cfg["model"] == "lenet-mini":
        if len(shape) == 3:
            chans, hw = shape[0], shape[1]
        else:
            chans, hw = 1, math.isqrt(int(np.prod(shape)))
            if hw * hw != int(np.prod(shape)):
                raise ConfigError(f"lenet-mini needs square images, got sample shape {shape}")
        return {"kind": "lenet-mini", "input_hw": hw, "channels": [4, 8],
                "num_classes": ds.num_classes, "in_channels": chans, "hidden": cfg["width"]}
    raise ConfigError(f"--model must be 'mlp' or 'lenet-mini', got {cfg['model']!r}")


def shape_for_model(ds: Dataset, spec: dict) -> Dataset:
    if spec["kind"] == "lenet-mini":
        return ds.reshape((spec.get("in_channels", 1), spec["input_hw"], spec["input_hw"]))
    return ds.reshape((int(np.prod(ds.sample_shape)),))


def open_trajectory(path):
    if path is None:
        raise ConfigError("a trajectory directory is required")
    if not (Path(path) / "manifest.json").exists():
        raise FileNotFoundError(f"no trajectory at {path}")
    traj = load_trajectory(path)
    graph = build_model(traj.model_spec)
    data_cfg = traj.meta.get("data")
    if not data_cfg:
        raise ConfigError(f"trajectory {path} does not record its dataset")
    ds = shape_for_model(load_data(data_cfg), traj.model_spec)
    return traj, graph, ds, data_cfg


def data_inputs(data_cfg: dict) -> list:
    spec = data_cfg["data"]
    return [spec[5:]] if spec.startswith("file:") else []


class Artifact:
    def __init__(self, command: str, cfg: dict):
        self.command = command
        self.config = {k: v for k, v in cfg.items() if k not in EXECUTION_KEYS}
        self.execution = {"workers": cfg.get("workers")}
        self.inputs: dict = {}
        self.t0 = time.perf_counter()
        self.out = Path(cfg["out"])

    def write(self, name: str, result: dict) -> Path:
        self.execution["wall_s"] = time.perf_counter() - self.t0
        payload = {"tool": "losscape", "version": __version__, "command": self.command,
                   "config": self.config, "inputs": self.inputs, "result": result,
                   "execution": self.execution}
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        text = json.dumps(payload, indent=1, sort_keys=True, allow_nan=False)
        path.write_text(text)
        if json.loads(path.read_text()) != json.loads(text):
            raise LosscapeError(f"{path} did not read back intact")
        return path


def cmd_train(cfg: dict) -> int:
    ds = load_data(cfg)
    spec = model_spec_for(cfg, ds)
    ds = shape_for_model(ds, spec)
    graph = build_model(spec)
    opt = OptimizerConfig(cfg["lr"], cfg["momentum"], cfg["batch_size"], cfg["epochs"],
                          cfg["seed"], cfg["save_every"])
    traj = train_sgd(graph, ds, opt, init_seed=cfg["seed"])
    data_cfg = {k: cfg[k] for k in DATA}
    traj.meta["data"] = data_cfg
    out = Path(cfg["out"])
    save_trajectory(out, traj, {"tool": "losscape", "version": __version__,
                                "config": {k: v for k, v in cfg.items() if k not in EXECUTION_KEYS},
                                "inputs": hash_inputs(data_inputs(data_cfg))})
    log.info("wrote %d snapshots to %s", len(traj), out)
    print(out / "manifest.json")
    return 0


def build_directions(cfg, traj, graph, subset):
    kind = cfg["dirs"]
    if kind == "pca":
        pair = pca_directions(traj)
    elif kind == "random":
        pair = random_pair(traj.layout, cfg["seed"])
    elif kind == "eigen":
        with HessianOperator(graph, traj.final, subset, cfg["workers"]) as op:
            pair = eigen_pair(op, min(cfg["m"], op.dim), cfg["seed"])
    elif kind == "user":
        files = cfg.get("dir_files") or []
        if len(files) != 2:
            raise ConfigError("--dirs user needs two --dir-files")
        pair = user_pair(files[0], files[1], traj.layout)
    else:
        raise ConfigError(f"unknown --dirs {kind!r}")
    return normalize_pair(pair, traj.final, "zero" if cfg.get("allow_degenerate") else "raise")


def cmd_landscape(cfg: dict) -> int:
    art = Artifact("landscape", cfg)
    traj, graph, ds, data_cfg = open_trajectory(cfg["trajectory"])
    art.inputs = hash_inputs([cfg["trajectory"], *data_inputs(data_cfg), *(cfg.get("dir_files") or [])])
    subset = ds.subset(cfg["fraction"], cfg["seed"])
    grid = evaluate_grid(graph, traj, build_directions(cfg, traj, graph, subset), subset,
                         cfg["grid"], cfg["border"], cfg["workers"])
    art.execution.update(grid.timing)
    path = art.write("landscape.json", grid.to_json())
    if cfg.get("csv", True):
        grid.write_csv(art.out / "landscape.csv")
    print(path)
    return 0


def _load_operator(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"operator file {path} not found")
    mat = np.load(p) if p.suffix == ".npy" else np.loadtxt(p, ndmin=2)
    return ExplicitOperator(mat)


def cmd_spectrum(cfg: dict) -> int:
    art = Artifact("spectrum", cfg)
    sigma = _sigma(cfg["sigma"])
    kw = {"k": cfg["k"], "m": cfg["m"], "sigma": sigma, "seed": cfg["seed"], "workers": cfg["workers"]}
    spectra = []
    if cfg.get("operator_file"):
        art.inputs = hash_inputs([cfg["operator_file"]])
        op = _load_operator(cfg["operator_file"])
        est = slq_spectrum(op, **{**kw, "m": min(cfg["m"], op.dim)})
        exact = op.eigvalsh()
        oracle = smoothed_density(exact, est.grid, est.sigma)
        spectra.append({"iteration": None, "spectrum": est.to_json(),
                        "oracle_l1": l1_distance(est.density, oracle, est.grid)})
    else:
        traj, graph, ds, data_cfg = open_trajectory(cfg["trajectory"])
        art.inputs = hash_inputs([cfg["trajectory"], *data_inputs(data_cfg)])
        subset = ds.subset(cfg["fraction"], cfg["seed"])
        if cfg.get("every_checkpoint"):
            snaps = traj.snapshots
        elif cfg.get("checkpoint") is None:
            snaps = [traj.snapshots[-1]]
        else:
            snaps = [s for s in traj.snapshots if s.iteration == int(cfg["checkpoint"])]
            if not snaps:
                raise FileNotFoundError(f"no checkpoint for iteration {cfg['checkpoint']}")
        for s in snaps:
            op = HessianOperator(graph, s.params, subset)
            est = slq_spectrum(op, **{**kw, "m": min(cfg["m"], op.dim)})
            spectra.append({"iteration": s.iteration, "spectrum": est.to_json()})
    print(art.write("spectrum.json", {"spectra": spectra}))
    return 0


def _minimum(path):
    """A trajectory directory (its final point) or a checkpoint file inside one."""
    p = Path(path)
    if p.is_dir():
        traj, graph, ds, data_cfg = open_trajectory(p)
        return traj.final, graph, ds, data_cfg
    if not p.exists():
        raise FileNotFoundError(f"{path} not found")
    traj_dir = p.parent
    if not (traj_dir / "manifest.json").exists():
        raise FileNotFoundError(f"checkpoint {path} is not inside a trajectory directory")
    manifest = json.loads((traj_dir / "manifest.json").read_text())
    spec = manifest["model"]
    data_cfg = manifest["meta"]["data"]
    ds = shape_for_model(load_data(data_cfg), spec)
    return load_checkpoint(p), build_model(spec), ds, data_cfg


def cmd_interpolate(cfg: dict) -> int:
    art = Artifact("interpolate", cfg)
    minima = cfg.get("minima") or []
    if len(minima) != 2:
        raise ConfigError("interpolate needs exactly two minima")
    theta_a, graph, ds, data_cfg = _minimum(minima[0])
    theta_b = _minimum(minima[1])[0]
    theta_a.check_layout(theta_b, "second minimum")
    art.inputs = hash_inputs([*minima, *data_inputs(data_cfg)])
    subset = ds.subset(cfg["fraction"], cfg["seed"])
    spec = None
    if cfg.get("spectra"):
        spec = {"k": cfg["k"], "m": min(cfg["m"], graph.num_params), "sigma": _sigma(cfg["sigma"]),
                "seed": cfg["seed"]}
    res = interpolate_minima(graph, theta_a, theta_b, subset, cfg["points"], spec, cfg["workers"])
    print(art.write("interpolation.json", res.to_json()))
    return 0


def _bench_setup(cfg):
    if cfg.get("trajectory"):
        traj, graph, ds, _ = open_trajectory(cfg["trajectory"])
        return traj, graph, ds
    ds = load_data(cfg)
    spec = model_spec_for(cfg, ds)
    ds = shape_for_model(ds, spec)
    graph = build_model(spec)
    opt = OptimizerConfig(0.01, DEFAULT_MOMENTUM, DEFAULT_BATCH, 1, cfg["seed"], 1)
    return train_sgd(graph, ds, opt, init_seed=cfg["seed"]), graph, ds


def cmd_bench(cfg: dict) -> int:
    art = Artifact("bench", cfg)
    counts = _worker_list(cfg["workers"])
    task = cfg["task"]
    if task == "sleep":
        job = SleepTask(max(counts), cfg["sleep"])
    else:
        traj, graph, ds = _bench_setup(cfg)
        subset = ds.subset(cfg["fraction"], cfg["seed"])
        m = min(cfg["m"], graph.num_params)
        if task == "grid":
            dirs = normalize_pair(random_pair(traj.layout, cfg["seed"]), traj.final)
            coords = project_trajectory(traj, dirs)
            xr = grid_ranges([c[0] for c in coords], DEFAULT_BORDER)
            yr = grid_ranges([c[1] for c in coords], DEFAULT_BORDER)
            job = GridTask(graph, traj.final, dirs, xr, yr, cfg["grid"], subset)
        elif task == "slq-iteration":
            job = SlqIterationTask(HessianOperator(graph, traj.final, subset), cfg["k"], m, cfg["seed"])
        elif task == "slq-data":
            batches = [b for b in ds.batches(DEFAULT_BATCH, cfg["seed"], 0)]
            job = SlqDataTask(graph, traj.final, batches, cfg["k"], m, cfg["seed"])
        else:
            raise ConfigError(f"unknown --task {task!r}")
    run = measure(job, counts, cfg["repeats"], name=task)
    rows = speedup_with_error(run) if 1 in counts else []
    fit = amdahl_fit(rows).to_json() if len({r[0] for r in rows}) >= 2 else None
    art.execution["run"] = run.to_json()
    result = {"task": task, "worker_counts": counts, "digests_agree": len(set(run.digests)) == 1}
    if rows:
        # measured speedups are timing data, so they live in execution
        art.execution["speedup"] = [{"p": p, "S": s, "sigma_S": e} for p, s, e in rows]
        art.execution["amdahl"] = fit
        (art.out).mkdir(parents=True, exist_ok=True)
        (art.out / "scaling.csv").write_text(scaling_table(rows))
    print(art.write("scaling.json", result))
    return 0


COMMANDS = {"train": cmd_train, "landscape": cmd_landscape, "spectrum": cmd_spectrum,
            "interpolate": cmd_interpolate, "bench": cmd_bench}


def _add_data_flags(p):
    p.add_argument("--data", help="'synth' or 'file:PATH' (GVDS dataset)")
    p.add_argument("--samples", type=int, help="synthetic sample count")
    p.add_argument("--classes", type=int, help="synthetic class count")
    p.add_argument("--input-hw", type=int, help="synthetic image side (dim = hw^2)")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--model", choices=["mlp", "lenet-mini"])
    p.add_argument("--width", type=int, help="hidden width of the dense layer")


def _add_spectrum_flags(p):
    p.add_argument("--k", type=int, help="number of probe vectors")
    p.add_argument("--m", type=int, help="Lanczos steps per probe")
    p.add_argument("--sigma", help="'auto' or the kernel width")
    p.add_argument("--fraction", type=float, help="fraction of the dataset the Hessian is taken over")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="losscape", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"losscape {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of settings; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        return p

    p = add("train", "train a model with SGD and save its trajectory")
    _add_data_flags(p)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--save-every", type=int)

    p = add("landscape", "loss grid on a plane through the final weights, with the projected path")
    p.add_argument("trajectory", nargs="?")
    p.add_argument("--dirs", choices=["pca", "random", "eigen", "user"])
    p.add_argument("--dir-files", nargs=2, metavar="GVCK")
    p.add_argument("--grid", type=int, help="grid side N")
    p.add_argument("--border", type=float)
    p.add_argument("--fraction", type=float)
    p.add_argument("--m", type=int, help="Lanczos steps for --dirs eigen")
    p.add_argument("--no-csv", dest="csv", action="store_false")
    p.add_argument("--allow-degenerate", action="store_true",
                   help="keep direction groups that are zero (e.g. dead units) at zero instead of failing")
    p.add_argument("--workers", type=int)

    p = add("spectrum", "Hessian eigenvalue density by stochastic Lanczos quadrature")
    p.add_argument("trajectory", nargs="?")
    p.add_argument("--checkpoint", type=int, help="iteration to analyse (default: final)")
    p.add_argument("--every-checkpoint", action="store_true")
    p.add_argument("--operator-file", help="explicit symmetric matrix (.npy or text) instead of a model")
    _add_spectrum_flags(p)
    p.add_argument("--workers", type=int)

    p = add("interpolate", "losses (and spectra) along the segment between two minima")
    p.add_argument("minima", nargs="*", help="two trajectory directories or checkpoint files")
    p.add_argument("--points", type=int)
    p.add_argument("--spectra", action="store_true", help="also compute a spectrum at every point")
    _add_spectrum_flags(p)
    p.add_argument("--workers", type=int)

    p = add("bench", "strong-scaling benchmark with an Amdahl fit")
    p.add_argument("--task", choices=["grid", "slq-iteration", "slq-data", "sleep"])
    p.add_argument("--workers", help="comma-separated worker counts, e.g. 1,2,4")
    p.add_argument("--repeats", type=int)
    p.add_argument("--trajectory", help="use this trajectory instead of training a fresh model")
    p.add_argument("--grid", type=int)
    p.add_argument("--sleep", type=float, help="seconds per job for --task sleep")
    _add_data_flags(p)
    _add_spectrum_flags(p)
    return parser


def resolve_config(command: str, args: dict) -> dict:
    """Merge settings with precedence flags > --config file > defaults."""
    defaults = DEFAULTS[command]
    file_cfg = {}
    if args.get("config"):
        path = Path(args["config"])
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        file_cfg = json.loads(path.read_text())
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown settings for {command}: {', '.join(unknown)}")
    flags = {k: v for k, v in args.items() if k not in ("config", "command", "verbose")}
    cfg = {**defaults, **file_cfg, **flags}
    if command == "landscape" and cfg.get("dir_files"):
        cfg["dir_files"] = list(cfg["dir_files"])
    return cfg


def main(argv=None) -> int:
    args = vars(make_parser().parse_args(argv))
    logging.basicConfig(level=logging.INFO if args.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args["command"]
    try:
        cfg = resolve_config(command, args)
        return COMMANDS[command](cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except RankDeficiencyError as exc:
        print(f"error: rank-deficient PCA: {exc}", file=sys.stderr)
        return EXIT_RANK
    except DegenerateDirectionError as exc:
        print(f"error: degenerate direction: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except LayoutError as exc:
        print(f"error: layout mismatch: {exc}", file=sys.stderr)
        return EXIT_LAYOUT
    except (LosscapeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
