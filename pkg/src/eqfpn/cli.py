"""Command-line front end: ``eqfpn generate | train | eval | simulate``.

Every command accepts ``--config FILE``, a JSON object whose keys are the
long flag names with dashes replaced by underscores. Explicit flags override
the file. The resolved configuration is echoed to stderr before the command
runs. Exit codes: 0 success, 1 numerical failure, 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (FormatError, GenerationError, InvalidInputError, generate_dataset, load_tntp_game,
                   read_dataset, write_dataset)
from .games import MatrixGame, MatrixGameSpec, TrafficGame, braess_network
from .metrics import ConfigurationError as PlayConfigError
from .metrics import TrafixParams, rel_mse, simulate_play, trafix
from .model import AdamState, FormatError as ModelFormatError
from .model import OperatorModel, load_model, predict, save_model, train
from .numerics import RngStream, ShapeError
from .solvers import ConfigurationError, DivergenceError, SolverConfig

log = logging.getLogger("eqfpn")


class UserError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


# -- generate -------------------------------------------------------------------------

def _build_game(cfg):
    if cfg.game == "braess":
        net = braess_network(rng=RngStream(cfg.seed, "braess/W"), context_dim=cfg.context_dim or 5)
        return TrafficGame(net, 0.0, 0.25)
    if cfg.game == "matrix":
        spec = MatrixGameSpec.random(cfg.a, cfg.context_dim or 3, RngStream(cfg.seed, "matrix/Wb"))
        return MatrixGame(spec)
    if cfg.game == "tntp":
        if not cfg.net or not cfg.trips:
            raise UserError("--game tntp needs --net and --trips")
        for p in (cfg.net, cfg.trips):
            if not Path(p).is_file():
                raise UserError(f"TNTP file not found: {p}")
        eps = cfg.eps_cap if cfg.eps_cap is not None else 0.3
        kappa = cfg.bpr_coeff if cfg.bpr_coeff is not None else 0.5
        return load_tntp_game(cfg.net, cfg.trips, cfg.context_dim or 10, eps, kappa, cfg.seed)
    raise UserError(f"unknown game {cfg.game!r}")


def cmd_generate(cfg) -> int:
    game = _build_game(cfg)
    ds = generate_dataset(game, cfg.n, cfg.seed, tol=cfg.tol, max_iter=cfg.max_iter, n_test=cfg.n_test)
    out = write_dataset(ds, cfg.out)
    print(f"wrote {ds.n_train} train and {ds.n_test} test samples to {out} "
          f"(max certificate residual {ds.certificates.max(initial=0.0):.2e})")
    return 0


# -- train -------------------------------------------------------------------------------

def _solver(cfg) -> SolverConfig:
    return SolverConfig(alpha=cfg.alpha, tol=cfg.tol, max_depth=cfg.max_depth)


def _new_model(cfg, ds, game):
    rng = RngStream(cfg.seed, "model/init")
    if isinstance(game, MatrixGame):
        return OperatorModel.matrix_game(ds.context_dim, ds.action_dim, rng)
    return OperatorModel.traffic(ds.context_dim, ds.action_dim, cfg.hidden_dim, cfg.n_hidden, rng,
                                 cfg.input_mode)


HISTORY_COLUMNS = ["epoch", "train_loss", "test_rel_mse", "test_trafix", "seconds"]


def cmd_train(cfg) -> int:
    ds = read_dataset(cfg.data)
    game = ds.game()
    if cfg.init_model:
        m = load_model(cfg.init_model)
    else:
        m = _new_model(cfg, ds, game)
    _check_dims(m, ds)
    opt = AdamState(lr=cfg.lr)
    m, hist = train(m, ds, game.constraint, _solver(cfg), opt, cfg.epochs, batch=cfg.batch, seed=cfg.seed,
                    schedule=cfg.schedule, target_loss=cfg.target_loss)
    save_model(m, cfg.out)
    if cfg.history:
        with open(cfg.history, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for r in hist.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])
    last = hist.records[-1] if hist.records else None
    if last is not None:
        print(f"trained {len(hist)} epochs: test rel_mse {last.test_rel_mse:.4e}, "
              f"trafix {last.test_trafix:.2f}%, mse {last.test_mse:.4e}")
    print(f"model written to {cfg.out}")
    return 0


def _check_dims(m, ds):
    if (m.context_dim, m.action_dim) != (ds.context_dim, ds.action_dim):
        raise UserError(f"model dims (context {m.context_dim}, action {m.action_dim}) do not match dataset "
                        f"(context {ds.context_dim}, action {ds.action_dim})")


# -- eval ---------------------------------------------------------------------------------

def cmd_eval(cfg) -> int:
    m = load_model(cfg.model)
    ds = read_dataset(cfg.data)
    _check_dims(m, ds)
    d, x_star = ds.test_arrays() if cfg.split == "test" else ds.train_arrays()
    pred = predict(m, d, ds.game().constraint, _solver(cfg))
    p = TrafixParams(cfg.trafix_eps, cfg.trafix_tau)
    rows = [(i, rel_mse(a, b), trafix(a, b, p), float(np.mean((a - b) ** 2)))
            for i, (a, b) in enumerate(zip(pred, x_star))]
    agg = tuple(float(np.mean([r[j] for r in rows])) if rows else float("nan") for j in (1, 2, 3))
    if cfg.out:
        with open(cfg.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "rel_mse", "trafix", "mse"])
            for r in rows:
                w.writerow([r[0]] + [repr(v) for v in r[1:]])
            w.writerow(["mean"] + [repr(v) for v in agg])
    print(f"{cfg.split} samples {len(rows)}: rel_mse {agg[0]:.4e} trafix {agg[1]:.2f}% mse {agg[2]:.4e}")
    return 0


# -- simulate -----------------------------------------------------------------------------

def cmd_simulate(cfg) -> int:
    ds = read_dataset(cfg.data)
    game = ds.game()
    if not isinstance(game, MatrixGame):
        raise UserError("simulate needs a matrix-game dataset")
    m = load_model(cfg.model)
    _check_dims(m, ds)
    solver = _solver(cfg)

    def equilibrium(d):
        return game.solve(d)[0]

    def model_predict(d):
        return predict(m, d, game.constraint, solver)

    traces = {}
    for policy in ("optimal", "nfpn", "uniform"):
        # same stream per policy: identical contexts across policies
        traces[policy] = simulate_play(game.spec, equilibrium, policy, cfg.n_games, cfg.n_contexts,
                                       RngStream(cfg.seed, "simulate"), model_predict,
                                       game.context_lo, game.context_hi)
    with open(cfg.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "y_optimal", "y_nfpn", "y_uniform"])
        for k in range(cfg.n_games):
            w.writerow([k + 1] + [repr(float(traces[p].y[k])) for p in ("optimal", "nfpn", "uniform")])
    print("y at k=%d: optimal %.4f nfpn %.4f uniform %.4f" % (
        cfg.n_games, *(traces[p].y[-1] for p in ("optimal", "nfpn", "uniform"))))
    return 0


# -- argument handling -------------------------------------------------------------------

def _solver_flags(p, alpha=1.0):
    p.add_argument("--alpha", type=float, default=alpha, help="splitting step size (default %(default)s)")
    p.add_argument("--max-depth", type=int, default=50, help="fixed-point iteration cap (default %(default)s)")
    p.add_argument("--tol", type=float, default=1e-4, help="fixed-point residual tolerance (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqfpn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="solve ground-truth equilibria for random contexts")
    g.add_argument("--config", help="JSON file with default values for these flags")
    g.add_argument("--game", choices=["braess", "matrix", "tntp"], default="braess")
    g.add_argument("--n", type=int, default=1100, help="number of samples (default %(default)s)")
    g.add_argument("--n-test", type=int, default=None, help="test split size (default n // 11)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="dataset", help="output directory (default %(default)s)")
    g.add_argument("--a", type=int, default=5, help="actions per player for --game matrix (default %(default)s)")
    g.add_argument("--context-dim", type=int, default=None,
                   help="context dimension (default 5 braess, 3 matrix, 10 tntp)")
    g.add_argument("--net", help="TNTP network file for --game tntp")
    g.add_argument("--trips", help="TNTP trips file for --game tntp")
    g.add_argument("--eps-cap", type=float, default=None, help="capacity perturbation bound (default 0.3)")
    g.add_argument("--bpr-coeff", type=float, default=None, help="congestion coefficient (default 0.5)")
    g.add_argument("--tol", type=float, default=1e-10, help="ground-truth residual tolerance (default %(default)s)")
    g.add_argument("--max-iter", type=int, default=100_000, help="ground-truth iteration cap (default %(default)s)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a fixed-point network to a dataset")
    t.add_argument("--config", help="JSON file with default values for these flags")
    t.add_argument("--data", required=False, help="dataset directory")
    t.add_argument("--out", default="model.npz", help="model file (default %(default)s)")
    t.add_argument("--history", default=None, help="per-epoch CSV")
    t.add_argument("--init-model", default=None, help="continue from this model file")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch", type=int, default=500)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--schedule", choices=["constant", "plateau"], default="constant")
    t.add_argument("--target-loss", type=float, default=None, help="stop once test MSE falls below this")
    t.add_argument("--hidden-dim", type=int, default=100)
    t.add_argument("--n-hidden", type=int, default=None, help="hidden layers (default 1 up to 300 edges, else 2)")
    t.add_argument("--input-mode", choices=["context", "action_context"], default="context")
    _solver_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a model on a dataset split")
    e.add_argument("--config", help="JSON file with default values for these flags")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--out", default=None, help="per-sample CSV with an aggregate row")
    e.add_argument("--trafix-eps", type=float, default=5e-3)
    e.add_argument("--trafix-tau", type=float, default=1e-3)
    _solver_flags(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="repeated one-hot play of a matrix game")
    s.add_argument("--config", help="JSON file with default values for these flags")
    s.add_argument("--model")
    s.add_argument("--data", help="matrix-game dataset directory (supplies the game)")
    s.add_argument("--n-games", type=int, default=1000)
    s.add_argument("--n-contexts", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="play.csv")
    _solver_flags(s)
    s.set_defaults(func=cmd_simulate)
    parser.subcommands = {"generate": g, "train": t, "eval": e, "simulate": s}
    return parser


REQUIRED = {"train": ["data"], "eval": ["model", "data"], "simulate": ["model", "data"]}


def resolve(argv) -> argparse.Namespace:
    """Parse flags, merging defaults from ``--config`` underneath explicit flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            conf = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UserError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise UserError(f"config file {args.config} is not valid JSON: {exc}")
        if not isinstance(conf, dict):
            raise UserError("config file must hold a JSON object")
        sub = parser.subcommands[args.command]
        known = set(vars(sub.parse_args([]))) - {"func", "config"}
        unknown = set(conf) - known
        if unknown:
            raise UserError(f"unknown config keys: {', '.join(sorted(unknown))}")
        sub.set_defaults(**conf)
        args = parser.parse_args(argv)
    for key in REQUIRED.get(args.command, []):
        if getattr(args, key) is None:
            raise UserError(f"--{key.replace('_', '-')} is required")
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = resolve(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING, format="%(message)s")
    shown = {k: v for k, v in sorted(vars(cfg).items()) if k != "func"}
    print("config: " + json.dumps(shown, sort_keys=True), file=sys.stderr)
    try:
        return cfg.func(cfg)
    except (UserError, FormatError, ModelFormatError, ShapeError, ConfigurationError, PlayConfigError,
            InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GenerationError, DivergenceError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
