"""Command-line surface.

Subcommands: sample, reconstruct, train, eval, ablate, gen-synthetic.
Flags may come from a flat key = value config file (--config); values
given on the command line win. Unknown config keys are a hard error.

Exit codes: 0 success, 2 dimension/format errors, 3 ingestion errors,
64 usage errors.
"""

from __future__ import annotations

import argparse
import sys
import time

from eqsense.autodiff import ShapeError
from eqsense.block import BlockConfig, ConfigError, validate_mask
from eqsense.data import SYNTHETIC_KINDS, generate_synthetic, ingest
from eqsense.equilibrium import DivergenceError, SolverConfig
from eqsense.figures import (
    save_ablation_chart,
    save_eval_chart,
    save_loss_curve,
    save_residual_trace,
    sibling_figure_path,
)
from eqsense.io import (
    FormatError,
    IngestionError,
    from_unit,
    load_checkpoint,
    parse_config,
    read_measurement,
    read_pgm,
    save_checkpoint,
    to_unit,
    write_measurement,
    write_pgm,
)
from eqsense.ista import OrthoTransform, SparseProblem, ista_solve, objective
from eqsense.model import Model
from eqsense.reporting import (
    format_ablation_table,
    format_eval_table,
    write_metrics_csv,
    write_train_log_csv,
)
from eqsense.sampling import StpOperator
from eqsense.training import TrainConfig, TrainingDiverged, ablate, evaluate_many, train

EXIT_OK = 0
EXIT_DIMENSION = 2
EXIT_INGESTION = 3
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Usage(Exception):
    pass


def _opt(name, typ, default=None, required=False, choices=None, help=""):
    return dict(name=name, typ=typ, default=default, required=required, choices=choices, help=help)


_COMMON = [_opt("seed", int, 0), _opt("config", str)]

_OPTIONS = {
    "sample": _COMMON
    + [
        _opt("image", str, required=True, help="square input PGM"),
        _opt("ratio", float, help="sampling ratio in (0, 1], used without a checkpoint"),
        _opt("checkpoint", str, help="use the trained operator from this checkpoint"),
        _opt("out", str, required=True, help="output measurement file"),
    ],
    "reconstruct": _COMMON
    + [
        _opt("measurement", str, required=True),
        _opt("checkpoint", str, required=True),
        _opt("solver", str, default="deq", choices=("deq", "ista-classic", "initial")),
        _opt("max-iter", int, default=50),
        _opt("tol", float, default=1e-5),
        _opt("memory", int, default=5, help="Anderson history length"),
        _opt("beta", float, default=1.0, help="Anderson relaxation"),
        _opt("mask", str, default="1111111", help="7-bit branch mask"),
        _opt("out", str, required=True, help="output PGM"),
    ],
    "train": _COMMON
    + [
        _opt("data-dir", str, required=True),
        _opt("ratio", float, required=True),
        _opt("out-checkpoint", str, required=True),
        _opt("log", str, required=True, help="per-step CSV log"),
        _opt("n", int, default=64, help="image side after center crop"),
        _opt("lr", float, default=1e-5),
        _opt("batch", int, default=16),
        _opt("epochs", int, default=1),
        _opt("steps", int, help="optional cap on total steps"),
        _opt("channels", int, default=32),
        _opt("cardinality", int, default=4),
        _opt("se-reduction", int, default=4),
        _opt("gamma-sym", float, default=0.01),
        _opt("gamma-init", float, default=0.1),
        _opt("mask", str, default="1111111"),
        _opt("fwd-max-iter", int, default=30),
        _opt("fwd-tol", float, default=1e-4),
        _opt("bwd-max-iter", int, default=30),
        _opt("bwd-tol", float, default=1e-4),
    ],
    "eval": _COMMON
    + [
        _opt("data-dir", str, required=True),
        _opt("checkpoints", str, required=True, help="ratio=path pairs, comma separated"),
        _opt("out-csv", str, required=True),
        _opt("max-iter", int, default=50),
        _opt("tol", float, default=1e-5),
        _opt("memory", int, default=5),
        _opt("beta", float, default=1.0),
        _opt("mask", str, default="1111111"),
    ],
    "ablate": _COMMON
    + [
        _opt("data-dir", str, required=True),
        _opt("checkpoint", str, required=True),
        _opt("masks", str, default="all,none,singles", help="comma list of presets or bit strings"),
        _opt("out-csv", str, required=True),
        _opt("max-iter", int, default=50),
        _opt("tol", float, default=1e-5),
        _opt("memory", int, default=5),
        _opt("beta", float, default=1.0),
    ],
    "gen-synthetic": _COMMON
    + [
        _opt("kind", str, required=True, choices=SYNTHETIC_KINDS),
        _opt("n", int, default=64),
        _opt("count", int, default=10),
        _opt("out-dir", str, required=True),
    ],
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="eqsense", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for command, options in _OPTIONS.items():
        p = sub.add_parser(command, help=None)
        for o in options:
            kwargs = {"default": None, "help": o["help"]}
            if o["typ"] is not str:
                kwargs["type"] = o["typ"]
            if o["choices"]:
                kwargs["choices"] = o["choices"]
            if o["name"] == "checkpoints":
                kwargs["nargs"] = "+"
            p.add_argument(f"--{o['name']}", **kwargs)
    return parser


def _resolve(args, options) -> dict:
    """Merge CLI values over config-file values over defaults."""
    file_values = {}
    if getattr(args, "config", None):
        file_values = parse_config(args.config)
        known = {o["name"] for o in options}
        unknown = set(file_values) - known
        if unknown:
            raise _Usage(f"unknown config keys: {', '.join(sorted(unknown))}")
    opts = {}
    for o in options:
        key = o["name"]
        cli_val = getattr(args, key.replace("-", "_"))
        if isinstance(cli_val, list):
            cli_val = ",".join(cli_val)
        if cli_val is not None:
            opts[key] = cli_val
        elif key in file_values:
            try:
                opts[key] = o["typ"](file_values[key])
            except ValueError as e:
                raise _Usage(f"config key {key!r}: {e}") from e
            if o["choices"] and opts[key] not in o["choices"]:
                raise _Usage(f"config key {key!r} must be one of {o['choices']}")
        elif o["required"]:
            raise _Usage(f"missing required --{key}")
        else:
            opts[key] = o["default"]
    return opts


def cmd_sample(opts) -> int:
    img = read_pgm(opts["image"])
    if img.shape[0] != img.shape[1]:
        raise ShapeError(f"input image is {img.shape[0]}x{img.shape[1]}, expected square")
    side = img.shape[0]
    if opts["checkpoint"]:
        model = load_checkpoint(opts["checkpoint"])
        if model.n != side:
            raise ShapeError(f"checkpoint expects {model.n}x{model.n} images, got {side}x{side}")
        op = model.stp
    else:
        if opts["ratio"] is None:
            raise _Usage("either --checkpoint or --ratio is required")
        op = StpOperator.initialize(side, opts["ratio"], opts["seed"])
    Y = op.measure_array(to_unit(img))
    write_measurement(opts["out"], Y)
    print(f"measurement {Y.shape[0]}x{Y.shape[1]} (ratio {(Y.shape[0] / side) ** 2:.4f}) -> {opts['out']}")
    return EXIT_OK


def cmd_reconstruct(opts) -> int:
    model = load_checkpoint(opts["checkpoint"])
    Y = read_measurement(opts["measurement"])
    if Y.shape != (model.m, model.m):
        raise ShapeError(f"measurement is {Y.shape}, checkpoint expects {(model.m, model.m)}")
    mask = validate_mask(opts["mask"])
    t0 = time.perf_counter()
    converged = True
    residual = 0.0
    iterations = 0
    if opts["solver"] == "initial":
        x = model.initial_estimate(Y)
    elif opts["solver"] == "deq":
        result = model.reconstruct(
            Y,
            SolverConfig(
                max_iter=opts["max-iter"], tol=opts["tol"],
                anderson_memory=opts["memory"], beta=opts["beta"],
            ),
            mask,
        )
        x = result.x_star
        converged = result.converged
        residual = result.residual_norm
        iterations = result.iterations
        save_residual_trace(result.residual_trace, sibling_figure_path(opts["out"], "trace"))
        print("residual_trace=" + ",".join(f"{r:.3e}" for r in result.residual_trace))
    else:  # ista-classic
        prob = SparseProblem(model.stp, Y, lam=0.01)
        psi = OrthoTransform("dct2", model.n)
        x, history = ista_solve(prob, psi, opts["max-iter"], opts["tol"], x0=model.initial_estimate(Y))
        iterations = len(history)
        residual = objective(x, prob, psi)
    seconds = time.perf_counter() - t0
    write_pgm(opts["out"], from_unit(x))
    print(
        f"solver={opts['solver']} iterations={iterations} residual={residual:.3e} "
        f"seconds={seconds:.3f} converged={str(converged).lower()}"
    )
    return EXIT_OK


def _flat_dataset(data_dir, n):
    return ingest(data_dir, n, (1.0, 0.0), seed=0)["train"]


def cmd_train(opts) -> int:
    dataset = _flat_dataset(opts["data-dir"], opts["n"])
    block_cfg = BlockConfig(
        channels=opts["channels"],
        cardinality=opts["cardinality"],
        se_reduction=opts["se-reduction"],
    )
    model = Model.create(opts["n"], opts["ratio"], block_cfg, seed=opts["seed"])
    cfg = TrainConfig(
        lr=opts["lr"],
        batch=opts["batch"],
        epochs=opts["epochs"],
        max_steps=opts["steps"],
        gamma_sym=opts["gamma-sym"],
        gamma_init=opts["gamma-init"],
        seed=opts["seed"],
        cs_ratio=opts["ratio"],
        n=opts["n"],
        mask=validate_mask(opts["mask"]),
        forward_solver=SolverConfig(max_iter=opts["fwd-max-iter"], tol=opts["fwd-tol"]),
        backward_solver=SolverConfig(max_iter=opts["bwd-max-iter"], tol=opts["bwd-tol"]),
    )
    model, rows = train(model, dataset, cfg)
    save_checkpoint(opts["out-checkpoint"], model)
    write_train_log_csv(opts["log"], rows)
    save_loss_curve(rows, sibling_figure_path(opts["log"], "curve"))
    print(
        f"trained {len(rows)} steps on {len(dataset)} images; "
        f"final loss {rows[-1]['loss']:.6e}; checkpoint -> {opts['out-checkpoint']}"
    )
    return EXIT_OK


def _parse_checkpoint_pairs(text):
    models = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise _Usage(f"--checkpoints entries must be ratio=path, got {part!r}")
        ratio_s, path = part.split("=", 1)
        ratio = float(ratio_s)
        model = load_checkpoint(path.strip())
        # the achieved ratio may differ from the request by one rounding
        # step of the measurement side, never more
        step_bound = ((model.m + 1) ** 2 - model.m ** 2) / model.n ** 2
        if abs(model.stp.ratio - ratio) > step_bound:
            raise ConfigError(
                f"{path.strip()}: checkpoint ratio {model.stp.ratio:.4f} does not match "
                f"requested {ratio:.4f}"
            )
        models[ratio] = model
    if not models:
        raise _Usage("--checkpoints is empty")
    return models


def cmd_eval(opts) -> int:
    models = _parse_checkpoint_pairs(opts["checkpoints"])
    sides = {m.n for m in models.values()}
    if len(sides) != 1:
        raise ShapeError(f"checkpoints disagree on image side: {sorted(sides)}")
    dataset = _flat_dataset(opts["data-dir"], sides.pop())
    solver = SolverConfig(max_iter=opts["max-iter"], tol=opts["tol"],
                          anderson_memory=opts["memory"], beta=opts["beta"])
    records, summaries = evaluate_many(models, dataset, solver, validate_mask(opts["mask"]))
    write_metrics_csv(opts["out-csv"], records)
    save_eval_chart(summaries, sibling_figure_path(opts["out-csv"], "chart"))
    print(format_eval_table(summaries))
    return EXIT_OK


def _expand_masks(text):
    masks = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if token == "all":
            masks.append((1,) * 7)
        elif token == "none":
            masks.append((0,) * 7)
        elif token == "singles":
            masks.extend(tuple(1 if i == j else 0 for i in range(7)) for j in range(7))
        else:
            masks.append(validate_mask(token))
    if not masks:
        raise _Usage("--masks is empty")
    return masks


def cmd_ablate(opts) -> int:
    model = load_checkpoint(opts["checkpoint"])
    dataset = _flat_dataset(opts["data-dir"], model.n)
    solver = SolverConfig(max_iter=opts["max-iter"], tol=opts["tol"],
                          anderson_memory=opts["memory"], beta=opts["beta"])
    records, summaries = ablate(model, dataset, _expand_masks(opts["masks"]), solver)
    write_metrics_csv(opts["out-csv"], records)
    save_ablation_chart(summaries, sibling_figure_path(opts["out-csv"], "chart"))
    print(format_ablation_table(summaries, "connected"))
    print()
    print(format_ablation_table(summaries, "disconnected"))
    return EXIT_OK


def cmd_gen_synthetic(opts) -> int:
    paths = generate_synthetic(opts["out-dir"], opts["kind"], opts["n"], opts["count"], opts["seed"])
    print(f"wrote {len(paths)} {opts['kind']} images ({opts['n']}x{opts['n']}) to {opts['out-dir']}")
    return EXIT_OK


_HANDLERS = {
    "sample": cmd_sample,
    "reconstruct": cmd_reconstruct,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gen-synthetic": cmd_gen_synthetic,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        opts = _resolve(args, _OPTIONS[args.command])
        return _HANDLERS[args.command](opts)
    except _Usage as e:
        print(f"eqsense {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeError, FormatError, ConfigError) as e:
        print(f"eqsense {args.command}: {e}", file=sys.stderr)
        return EXIT_DIMENSION
    except IngestionError as e:
        print(f"eqsense {args.command}: {e}", file=sys.stderr)
        return EXIT_INGESTION
    except (TrainingDiverged, DivergenceError) as e:
        print(f"eqsense {args.command}: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"eqsense {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
