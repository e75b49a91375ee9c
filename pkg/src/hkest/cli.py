"""Command-line front end: hkest <command> [options].

Settings come from built-in defaults, then an optional ``--config`` JSON
file, then explicit flags (flags win).  Every run prints the fully
resolved settings as one JSON line on stderr (``resolved-config: {...}``);
that JSON is itself a valid ``--config`` file for an exact replay.

Exit codes: 0 ok, 2 bad input, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

NEURAL_METHODS = ("bnn-th", "bnn-sam", "bnn-th+mpae", "bnn-sam+mpae")
METHODS = ("xu", "op") + NEURAL_METHODS

DEFAULTS = {
    "simulate": {"log10_alpha": None, "k": None, "n": 4096, "rho": 0.0, "seed": 0, "out": None},
    "features": {"samples": None, "out": None},
    "forward": {"log10_alpha": None, "k": None, "lut": None, "out": None},
    "build-lut": {"res_alpha": 161, "res_k": 126, "out": None},
    "estimate": {"method": "xu", "features": None, "lut": None, "model": None, "mpae": None,
                 "seed": 0, "out": None},
    "train": {"model": None, "ns": 1024, "count": 50000, "rho": 0.2, "seed": 0, "epochs": 300,
              "batch_size": 256, "lr": 1e-3, "patience": 20, "finetune_epochs": 300,
              "bottleneck": 3, "lut": None, "mpae": None, "out": None},
    "bench": {"method": ["xu"], "ns": [4096], "rho": 0.2, "seed": 0, "lut": None,
              "model_dir": None, "out_csv": None, "out_json": None, "maps_dir": None},
    "pimage": {"envelope": None, "phantom": None, "shape": [512, 256], "rho": 0.2,
               "patch": [64, 64], "overlap": 0.63, "stride": 1, "method": "xu", "lut": None,
               "model": None, "mpae": None, "seed": 0, "out": None},
}
REQUIRED = {
    "simulate": ("log10_alpha", "k", "out"), "features": ("samples", "out"),
    "forward": ("log10_alpha", "k"), "build-lut": ("out",),
    "estimate": ("features", "out"), "train": ("model", "out"),
    "bench": ("lut",), "pimage": ("out",),
}


class InputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hkest", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog="Exit codes: 0 ok, 2 bad input, 3 numerical failure, 4 I/O error.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS,
                            description=help_)
        sp.add_argument("--config", help="JSON settings file; explicit flags override it")
        sp.add_argument("--threads", type=int, help="batch worker threads (1 = byte-exact replay)")
        sp.add_argument("--quiet", action="store_true", help="suppress stdout summaries")
        return sp

    s = cmd("simulate", "draw correlated HK envelope samples to a sample file")
    s.add_argument("--log10-alpha", type=float, help="log10 of the clustering parameter")
    s.add_argument("--k", type=float, help="coherent-to-diffuse ratio")
    s.add_argument("--n", type=int, help="number of samples (default 4096)")
    s.add_argument("--rho", type=float, help="lag-one correlation in [0, 1) (default 0)")
    s.add_argument("--seed", type=int, help="generator seed (default 0)")
    s.add_argument("--out", help="output sample file (JSON sidecar written alongside)")

    s = cmd("features", "compute the 8 envelope features of sample files")
    s.add_argument("--samples", nargs="+", help="one or more sample files")
    s.add_argument("--out", help="feature CSV")

    s = cmd("forward", "theoretical features at one parameter point")
    s.add_argument("--log10-alpha", type=float, help="log10 of the clustering parameter")
    s.add_argument("--k", type=float, help="coherent-to-diffuse ratio")
    s.add_argument("--lut", help="also report the LUT interpolant and its deviation")
    s.add_argument("--out", help="optional feature CSV")

    s = cmd("build-lut", "tabulate theoretical features over the parameter box")
    s.add_argument("--res-alpha", type=int, help="log10 alpha nodes (default 161)")
    s.add_argument("--res-k", type=int, help="k nodes (default 126)")
    s.add_argument("--out", help="LUT file (JSON sidecar written alongside)")

    s = cmd("estimate", "estimate (log10 alpha, k) for every row of a feature CSV")
    s.add_argument("--method", choices=METHODS, help="estimator (default xu)")
    s.add_argument("--features", help="feature CSV")
    s.add_argument("--lut", help="LUT file (xu, op)")
    s.add_argument("--model", help="BayesNet model manifest (bnn-*)")
    s.add_argument("--mpae", help="MPAE model manifest (*+mpae)")
    s.add_argument("--seed", type=int, help="seed for stochastic estimators (default 0)")
    s.add_argument("--out", help="estimate CSV")

    s = cmd("train", "train an MPAE or a BNN variant")
    s.add_argument("--model", choices=("mpae", "bnn-th", "bnn-sam", "bnn-sam+mpae"))
    s.add_argument("--ns", type=int, help="sample size of the training features (default 1024)")
    s.add_argument("--count", type=int, help="training draws (default 50000)")
    s.add_argument("--rho", type=float, help="lag-one correlation of the training data (default 0.2)")
    s.add_argument("--seed", type=int, help="data and training seed (default 0)")
    s.add_argument("--epochs", type=int, help="maximum epochs (default 300)")
    s.add_argument("--batch-size", type=int, help="mini-batch size (default 256)")
    s.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    s.add_argument("--patience", type=int, help="early-stopping patience (default 20)")
    s.add_argument("--finetune-epochs", type=int,
                   help="MPAE dropout-free refinement epochs after the dropout phase (default 300)")
    s.add_argument("--bottleneck", type=int, help="MPAE bottleneck width (default 3)")
    s.add_argument("--lut", help="LUT file supplying theoretical features")
    s.add_argument("--mpae", help="trained MPAE for bnn-sam+mpae")
    s.add_argument("--out", help="model manifest path (weights go to the .bin sibling)")

    s = cmd("bench", "evaluate estimators on the 3410-case test grid")
    s.add_argument("--method", nargs="+", choices=METHODS, help="methods (default xu)")
    s.add_argument("--ns", nargs="+", type=int, help="sample sizes (default 4096)")
    s.add_argument("--rho", type=float, help="lag-one correlation of the test data (default 0.2)")
    s.add_argument("--seed", type=int, help="test-grid seed (default 0)")
    s.add_argument("--lut", help="LUT file")
    s.add_argument("--model-dir", help="directory with bnn-th.json, bnn-sam-<ns>.json, mpae-<ns>.json")
    s.add_argument("--out-csv", help="long-format per-case CSV")
    s.add_argument("--out-json", help="JSON summary")
    s.add_argument("--maps-dir", help="directory for 31x11 error/variance map CSVs")

    s = cmd("pimage", "parametric (alpha, k) image of a 2-D envelope")
    s.add_argument("--envelope", help="2-D envelope as .npy")
    s.add_argument("--phantom", help='synthesize a two-region field: "la0,k0;la1,k1"')
    s.add_argument("--shape", nargs=2, type=int, help="phantom rows cols (default 512 256)")
    s.add_argument("--rho", type=float, help="phantom lag-one correlation (default 0.2)")
    s.add_argument("--patch", nargs=2, type=int, help="patch rows cols (default 64 64)")
    s.add_argument("--overlap", type=float, help="patch overlap fraction (default 0.63)")
    s.add_argument("--stride", type=int, help="axial decimation inside a patch (default 1)")
    s.add_argument("--method", choices=METHODS, help="estimator (default xu)")
    s.add_argument("--lut", help="LUT file (xu, op)")
    s.add_argument("--model", help="BayesNet model manifest (bnn-*)")
    s.add_argument("--mpae", help="MPAE model manifest (*+mpae)")
    s.add_argument("--seed", type=int, help="phantom / estimator seed (default 0)")
    s.add_argument("--out", help="float-grid output (JSON sidecar written alongside)")
    return p


def resolve(args: argparse.Namespace) -> dict:
    explicit = dict(vars(args))
    command = explicit.pop("command")
    cfg = dict(DEFAULTS[command])
    cfg.update(threads=os.cpu_count() or 1, quiet=False)
    path = explicit.pop("config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise InputError(f"config {path}: expected a JSON object")
        if loaded.pop("command", command) != command:
            raise InputError(f"config {path} is for a different command")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise InputError(f"config {path}: unknown settings {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(explicit)
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if command == "pimage" and cfg.get("envelope") is None and cfg.get("phantom") is None:
        missing.append("envelope or phantom")
    if missing:
        raise InputError(f"{command}: missing required settings {missing}")
    if cfg["threads"] < 1:
        raise InputError("--threads must be >= 1")
    return {"command": command, **cfg}


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _say(cfg, *msg):
    if not cfg["quiet"]:
        print(*msg)


def _load_lut(path):
    from .forward import FeatureLUT
    if path is None:
        raise InputError("this method needs --lut")
    return FeatureLUT.load(path)


def make_estimator(method, lut_path=None, model=None, mpae=None, seed=0):
    from .estimators import OPEstimator, XUEstimator
    if method == "xu":
        return XUEstimator(_load_lut(lut_path))
    if method == "op":
        return OPEstimator(_load_lut(lut_path), seed=seed)
    from .neural import BayesNet, BNNEstimator, DenseNet, load_model
    if model is None:
        raise InputError(f"method {method} needs --model")
    net = load_model(model) if not isinstance(model, BayesNet) else model
    if not isinstance(net, BayesNet):
        raise InputError(f"{model} is not a Bayesian network")
    ae = None
    if method.endswith("+mpae"):
        if mpae is None:
            raise InputError(f"method {method} needs --mpae")
        ae = load_model(mpae) if not isinstance(mpae, DenseNet) else mpae
    return BNNEstimator(net, ae, seed=seed, name=method)


def _write_estimates(path, res) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["log10_alpha", "k", "std_log10_alpha", "std_k", "converged", "residual"])
        for i in range(len(res)):
            sd = res.uncertainty[i] if res.uncertainty is not None else (np.nan, np.nan)
            conv = int(res.converged[i]) if res.converged is not None else 1
            resid = res.residual[i] if res.residual is not None else np.nan
            w.writerow([repr(float(res.log10_alpha[i])), repr(float(res.k[i])),
                        repr(float(sd[0])), repr(float(sd[1])), conv, repr(float(resid))])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg):
    from .hkmodel import HKParams, lag_correlation, sample_correlated, save_samples
    p = HKParams(cfg["log10_alpha"], cfg["k"])
    s = sample_correlated(p, cfg["n"], cfg["rho"], cfg["seed"])
    save_samples(cfg["out"], s, log10_alpha=p.log10_alpha, k=p.k, seed=cfg["seed"])
    v = s.values
    _say(cfg, f"wrote {v.size} samples to {cfg['out']}: mean {v.mean():.6g}, std {v.std():.6g}, "
              f"lag-1 corr {lag_correlation(s) if v.size > 2 else float('nan'):.4f}")


def cmd_features(cfg):
    from .features import feature_matrix, write_feature_csv
    from .hkmodel import load_samples
    rows, truth = [], {"log10_alpha": [], "k": [], "ns": [], "rho": []}
    have_truth = True
    for path in cfg["samples"]:
        s = load_samples(path)
        rows.append(feature_matrix(s.values)[0])
        for key in ("log10_alpha", "k"):
            val = s.meta.get(key)
            have_truth &= val is not None
            truth[key].append(np.nan if val is None else val)
        truth["ns"].append(len(s))
        truth["rho"].append(s.rho)
    if not have_truth:
        truth = {"ns": truth["ns"], "rho": truth["rho"]}
    truth["ns"] = np.array(truth["ns"], dtype=int)
    write_feature_csv(cfg["out"], np.array(rows), truth)
    _say(cfg, f"wrote features of {len(rows)} sample file(s) to {cfg['out']}")


def cmd_forward(cfg):
    from .features import FEATURE_NAMES, write_feature_csv
    from .forward import theoretical_features
    from .hkmodel import HKParams
    p = HKParams(cfg["log10_alpha"], cfg["k"])
    f = theoretical_features(p).to_array()
    report = {"direct": dict(zip(FEATURE_NAMES, f.tolist()))}
    if cfg["lut"]:
        lut = _load_lut(cfg["lut"])
        if not lut.contains(p.log10_alpha, p.k):
            raise InputError("point lies outside the LUT hull")
        g = lut.lookup(p.log10_alpha, p.k)
        report["lut"] = dict(zip(FEATURE_NAMES, g.tolist()))
        report["max_abs_diff"] = float(np.max(np.abs(f - g)))
    if cfg["out"]:
        write_feature_csv(cfg["out"], f[None, :], {"log10_alpha": [p.log10_alpha], "k": [p.k]})
    _say(cfg, json.dumps(report, indent=2))


def cmd_build_lut(cfg):
    from .forward import build_lut

    def progress(i, n):
        if not cfg["quiet"] and (i % 20 == 0 or i == n):
            print(f"  {i}/{n} alpha rows", file=sys.stderr)
    lut = build_lut(cfg["res_alpha"], cfg["res_k"], progress=progress)
    lut.save(cfg["out"])
    _say(cfg, f"wrote {lut.shape[0]}x{lut.shape[1]} LUT to {cfg['out']} "
              f"(hash {lut.meta['build_hash']})")
    _say(cfg, json.dumps(lut.meta["diagnostics"], indent=2))


def cmd_estimate(cfg):
    from .estimators import estimate_parallel
    from .features import read_feature_csv
    F, _ = read_feature_csv(cfg["features"])
    if F.shape[0] == 0:
        raise InputError(f"{cfg['features']}: no feature rows")
    est = make_estimator(cfg["method"], cfg["lut"], cfg["model"], cfg["mpae"], cfg["seed"])
    res = estimate_parallel(est, F, cfg["threads"])
    _write_estimates(cfg["out"], res)
    nconv = int(np.sum(res.converged)) if res.converged is not None else len(res)
    _say(cfg, f"{cfg['method']}: {len(res)} estimates written to {cfg['out']} ({nconv} converged)")


def cmd_train(cfg):
    from .benchkit import gen_theory_set, gen_training_set
    from .estimators import lut_norm
    from .neural import TrainConfig, load_model, save_model, train_bnn, train_mpae
    lut = _load_lut(cfg["lut"])
    norm = lut_norm(lut)
    model = cfg["model"]
    tc = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     patience=cfg["patience"], seed=cfg["seed"],
                     finetune_epochs=cfg["finetune_epochs"],
                     ns=None if model == "bnn-th" else cfg["ns"])

    def progress(epoch, tr, va):
        if not cfg["quiet"] and epoch % 10 == 0:
            print(f"  epoch {epoch}: train {tr:.5g}  val {va:.5g}", file=sys.stderr)
    if model == "bnn-th":
        data = gen_theory_set(cfg["count"], cfg["seed"], lut)
        net = train_bnn(data.theory, data.params, "th", tc, norm, progress=progress)
    else:
        data = gen_training_set(cfg["count"], cfg["ns"], cfg["rho"], cfg["seed"], lut)
        if model == "mpae":
            net = train_mpae(data.noisy, data.theory, tc, norm, cfg["bottleneck"], progress)
        elif model == "bnn-sam":
            net = train_bnn(data.noisy, data.params, "sam", tc, norm, progress=progress)
        else:
            if cfg["mpae"] is None:
                raise InputError("bnn-sam+mpae needs --mpae")
            net = train_bnn(data.noisy, data.params, "sam+mpae", tc, norm,
                            mpae=load_model(cfg["mpae"]), progress=progress)
    net.meta["rho"] = cfg["rho"] if model != "bnn-th" else None
    save_model(cfg["out"], net)
    log = net.meta["log"]
    _say(cfg, f"{model}: best epoch {log['best_epoch']}, val loss "
              f"{log['val_loss'][log['best_epoch']]:.5g}; wrote {cfg['out']}")


def _bench_models(method, ns, model_dir):
    if method in ("xu", "op"):
        return None, None
    if model_dir is None:
        raise InputError(f"method {method} needs --model-dir")
    d = Path(model_dir)
    model = d / ("bnn-th.json" if method.startswith("bnn-th") else f"bnn-sam-{ns}.json")
    if method == "bnn-sam+mpae":
        model = d / f"bnn-sam+mpae-{ns}.json"
    mpae = d / f"mpae-{ns}.json" if method.endswith("+mpae") else None
    return str(model), (str(mpae) if mpae else None)


def cmd_bench(cfg):
    from .benchkit import (EvalReport, GridResult, error_maps, gen_test_grid, write_matrix_csv)
    from .estimators import estimate_parallel
    results = []
    for ns in cfg["ns"]:
        grid = gen_test_grid(ns, cfg["rho"], cfg["seed"])
        for method in cfg["method"]:
            model, mpae = _bench_models(method, ns, cfg["model_dir"])
            est = make_estimator(method, cfg["lut"], model, mpae, cfg["seed"])
            res = estimate_parallel(est, grid.features, cfg["threads"])
            results.append(GridResult(method, grid, res.params_array(), res.uncertainty))
    report = EvalReport.build(results)
    if cfg["out_csv"]:
        report.write(cfg["out_csv"], cfg["out_json"] or str(cfg["out_csv"]) + ".json")
    elif cfg["out_json"]:
        Path(cfg["out_json"]).write_text(json.dumps({"summaries": report.summaries,
                                                     "wilcoxon": report.pvalues}, indent=2) + "\n")
    if cfg["maps_dir"]:
        out = Path(cfg["maps_dir"])
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            for name, m in error_maps(r).items():
                write_matrix_csv(out / f"{r.method}-{r.grid.ns}-{name}.csv", m)
    for s in report.summaries:
        a, k = s["mae_log10_alpha"], s["mae_k"]
        _say(cfg, f"{s['method']:>13} ns={s['ns']:<5} MAE log10a {a['median']:.4f} "
                  f"[{a['q1']:.4f}, {a['q3']:.4f}]  MAE k {k['median']:.4f} [{k['q1']:.4f}, {k['q3']:.4f}]")


def cmd_pimage(cfg):
    from .benchkit import parametric_image, synthetic_phantom
    if cfg["envelope"]:
        env = np.load(cfg["envelope"])
    else:
        try:
            regions = [tuple(float(v) for v in part.split(",")) for part in cfg["phantom"].split(";")]
        except ValueError as exc:
            raise InputError(f"bad --phantom spec {cfg['phantom']!r}") from exc
        if len(regions) != 2 or any(len(r) != 2 for r in regions):
            raise InputError('--phantom expects "la0,k0;la1,k1"')
        env, _ = synthetic_phantom(tuple(cfg["shape"]), regions, cfg["rho"], cfg["seed"])
    est = make_estimator(cfg["method"], cfg["lut"], cfg["model"], cfg["mpae"], cfg["seed"])
    img = parametric_image(env, tuple(cfg["patch"]), est, cfg["overlap"], cfg["stride"])
    img.save(cfg["out"], method=cfg["method"], image_shape=list(env.shape))
    _say(cfg, f"{img.log10_alpha.shape[0]}x{img.log10_alpha.shape[1]} patches; median log10a "
              f"{np.nanmedian(img.log10_alpha):.3f}, median k {np.nanmedian(img.k):.3f}; wrote {cfg['out']}")


COMMANDS = {"simulate": cmd_simulate, "features": cmd_features, "forward": cmd_forward,
            "build-lut": cmd_build_lut, "estimate": cmd_estimate, "train": cmd_train,
            "bench": cmd_bench, "pimage": cmd_pimage}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    from .hkmodel import ConvergenceError
    from .neural import TrainingDiverged
    try:
        cfg = resolve(args)
        print("resolved-config: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)
        COMMANDS[cfg["command"]](cfg)
    except (ConvergenceError, TrainingDiverged, FloatingPointError) as exc:
        print(f"hkest: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, EOFError) as exc:
        print(f"hkest: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError, KeyError) as exc:
        print(f"hkest: bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
