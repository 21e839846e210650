"""Command line interface.

Subcommands: train, register, invert, evaluate, bounds, synth.  Exit codes:
0 success, 2 validation/input error, 3 solver non-convergence.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import fileio, metrics, training
from .errors import ConvergenceError, ValidationError
from .fields import identity_grid, interp_field, jacobian_stats
from .inversion import FixedPointConfig, fixed_point_invert
from .networks import EncoderConfig, load_weights
from .pipeline import (complete_jacobian_stats, consistency_errors,
                       infer_complete, register)
from .splines import compute_K, gamma_for_level
from .tensor import no_grad

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _apply_threads(threads):
    if not threads:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(threads)
    except ImportError:
        pass


def _cmd_bounds(args):
    dims = [args.n] if args.n else [2, 3]
    out = {}
    print("n,k,K,gamma")
    for n in dims:
        ks, gammas = [], []
        for k in range(args.max_level + 1):
            K = compute_K(n, k)
            gamma = gamma_for_level(n, k)
            ks.append(K)
            gammas.append(gamma)
            print("%d,%d,%.9f,%.9f" % (n, k, K, gamma))
        out[str(n)] = {"K": ks, "gamma": gammas}
    if args.json:
        with open(args.json, "w") as f:
            json.dump(out, f, indent=1)
    return 0


def _cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    index = []
    for i in range(args.count):
        seed = args.seed * 100003 + i
        pair = training.synth_pair(seed, args.size, args.n)
        name = "pair_%03d" % i
        prefix = os.path.join(args.out, name)
        fileio.write_volume(prefix + "_xa", pair.x_a)
        fileio.write_volume(prefix + "_xb", pair.x_b)
        fileio.write_labels(prefix + "_labels_a", pair.labels_a)
        fileio.write_labels(prefix + "_labels_b", pair.labels_b)
        fileio.write_field(prefix + "_gtrue", pair.g_true)
        index.append({"name": name, "seed": seed})
    with open(os.path.join(args.out, "index.json"), "w") as f:
        json.dump({"size": args.size, "n": args.n, "pairs": index}, f, indent=1)
    print("wrote %d pairs to %s" % (args.count, args.out))
    return 0


def _load_pairs(data_dir):
    with open(os.path.join(data_dir, "index.json")) as f:
        index = json.load(f)
    pairs = []
    for entry in index["pairs"]:
        prefix = os.path.join(data_dir, entry["name"])
        x_a, _ = fileio.read_volume(prefix + "_xa")
        x_b, _ = fileio.read_volume(prefix + "_xb")
        labels_a, _ = fileio.read_labels(prefix + "_labels_a")
        labels_b, _ = fileio.read_labels(prefix + "_labels_b")
        g_true, _ = fileio.read_field(prefix + "_gtrue")
        pairs.append(training.SyntheticPair(x_a, x_b, labels_a, labels_b, g_true))
    return pairs


def _read_config_file(path):
    if path.endswith(".json"):
        with open(path) as f:
            return json.load(f)
    try:
        import tomllib
    except ImportError as exc:
        raise ValidationError(
            "TOML configs need Python >= 3.11; use a .json config") from exc
    with open(path, "rb") as f:
        return tomllib.load(f)


def _cmd_train(args):
    raw = _read_config_file(args.config) if args.config else {}
    enc_raw = raw.pop("encoder", {})
    if "channels" in enc_raw:
        enc_raw["channels"] = tuple(enc_raw["channels"])
    overrides = {
        "lam": args.lam, "learning_rate": args.lr, "steps": args.steps,
        "batch_size": args.batch_size, "size": args.size, "n": args.n,
        "mode": args.mode.replace("-", "_") if args.mode else None,
        "seed": args.seed,
    }
    for key, val in overrides.items():
        if val is not None:
            raw[key] = val
    raw["dtype"] = _DTYPES[args.dtype]
    raw["checkpoint_path"] = args.out
    try:
        if enc_raw:
            raw["encoder"] = EncoderConfig(**enc_raw)
        cfg = training.TrainConfig(**raw)
    except TypeError as exc:
        raise ValidationError("bad config value: %s" % exc) from exc

    def progress(step, loss):
        if args.verbose and (step % 50 == 0 or step == cfg.steps - 1):
            print("step %d loss %.4f" % (step, loss), flush=True)

    weights, history = training.train(cfg, progress=progress)
    fileio.write_csv(args.out + "_history.csv", ["step", "loss"],
                     list(enumerate(history)))
    final = history[-1] if history else float("nan")
    print("trained %d steps, final loss %.4f, checkpoint %s"
          % (cfg.steps, final, args.out))
    return 0


def _cmd_register(args):
    weights = load_weights(args.weights, dtype=_DTYPES[args.dtype])
    x_a, _ = fileio.read_volume(args.image_a)
    x_b, _ = fileio.read_volume(args.image_b)
    mode = args.mode.replace("-", "_")
    with no_grad():
        result = register(weights, x_a.astype(weights.dtype),
                          x_b.astype(weights.dtype), mode=mode)
    if args.variant == "complete":
        shape = x_a.shape[1:]
        pts = identity_grid(shape, np.float64).reshape(len(shape), -1)
        f12 = infer_complete(result, pts, "12").reshape((len(shape),) + shape)
        f21 = infer_complete(result, pts, "21").reshape((len(shape),) + shape)
        f12, f21 = f12.astype(np.float32), f21.astype(np.float32)
        folding, det_std = complete_jacobian_stats(
            result, min(10 ** 5, 20 * int(np.prod(shape))))
    else:
        f12, f21 = result.f12.data, result.f21.data
        folding, det_std = jacobian_stats(f12, 20 * int(np.prod(f12.shape[1:])))
    fileio.write_field(args.out_prefix + "_f12", f12)
    fileio.write_field(args.out_prefix + "_f21", f21)
    inverse_err, cycle_err = consistency_errors(
        weights, x_a.astype(weights.dtype), x_b.astype(weights.dtype), mode)
    report = {
        "mode": mode,
        "variant": args.variant,
        "inversion_iterations": result.iterations,
        "inverse_err": inverse_err,
        "cycle_err": cycle_err,
        "folding_fraction": folding,
        "det_std": det_std,
    }
    with open(args.out_prefix + "_report.json", "w") as f:
        json.dump(report, f, indent=1)
    print("registered: inverse_err %.3g cycle_err %.3g folding %.3g"
          % (inverse_err, cycle_err, folding))
    return 0


def _cmd_invert(args):
    d, header = fileio.read_field(args.field)
    cfg = FixedPointConfig(tol=args.tol, max_iter=args.max_iter)
    inverse, iterations = fixed_point_invert(d.astype(_DTYPES[args.dtype]), cfg)
    ident = identity_grid(d.shape[1:], np.float64)
    residual = float(np.max(np.abs(
        inverse + interp_field(d.astype(np.float64), ident + inverse))))
    fileio.write_field(args.out, inverse)
    with open(args.out + "_report.json", "w") as f:
        json.dump({"iterations": iterations, "residual": residual,
                   "tol": args.tol}, f, indent=1)
    print("inverted in %d evaluations, residual %.3g" % (iterations, residual))
    return 0


def _cmd_evaluate(args):
    weights = load_weights(args.weights, dtype=_DTYPES[args.dtype])
    pairs = _load_pairs(args.data)
    mode = args.mode.replace("-", "_")
    report = metrics.evaluate(weights, pairs, mode=mode)
    agg = report.aggregate()
    payload = {
        "aggregate": agg,
        "rows": [{
            "dice_mean": r.dice_mean,
            "dice_baseline": r.dice_baseline,
            "hd95_mean": r.hd95_mean,
            "folding": r.folding,
            "det_std": r.det_std,
            "inverse_err": r.inverse_err,
            "cycle_err": r.cycle_err,
        } for r in report.rows],
    }
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=1)
    if args.csv:
        cols = ["dice_mean", "dice_baseline", "hd95_mean", "folding",
                "det_std", "inverse_err", "cycle_err"]
        fileio.write_csv(args.csv, cols,
                         [[getattr(r, c) for c in cols] for r in report.rows])
    for key in ("dice_mean", "dice_baseline", "inverse_err", "cycle_err"):
        print("%s: %.4f +- %.4f" % (key, agg[key]["mean"], agg[key]["std"]))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="defreg",
        description="Symmetric, inverse-consistent deformable registration "
                    "with guaranteed-invertible spline displacement fields.")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=0)
    parser.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bounds", help="print the clamp-bound table")
    p.add_argument("--n", type=int, choices=(1, 2, 3), default=0)
    p.add_argument("--max-level", type=int, default=8)
    p.add_argument("--json", default=None)
    p.set_defaults(func=_cmd_bounds)

    p = sub.add_parser("synth", help="generate synthetic evaluation pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n", type=int, default=2, choices=(2, 3))
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on synthetic pairs")
    p.add_argument("--config", default=None, help="TOML or JSON TrainConfig")
    p.add_argument("--out", default="model")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--n", type=int, default=None, choices=(2, 3))
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--mode", choices=("sym", "non-sym"), default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("register", help="register two stored volumes")
    p.add_argument("--weights", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--mode", choices=("sym", "non-sym"), default="sym")
    p.add_argument("--variant", choices=("standard", "complete"),
                   default="standard")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("invert", help="invert a stored displacement field")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tol", type=float, default=0.01)
    p.add_argument("--max-iter", type=int, default=50)
    p.set_defaults(func=_cmd_invert)

    p = sub.add_parser("evaluate", help="run the metric suite on stored pairs")
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--mode", choices=("sym", "non-sym"), default="sym")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.func(args) or 0
    except ValidationError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
