"""Command line tool: generate data, train, sample, evaluate, inspect.

The tool is a thin binding over the library modules.  Every invocation
echoes a ``config {...}`` JSON line with all resolved arguments so runs
can be reproduced from their logs.  Exit codes: 0 success, 2 usage
errors, 3 data/schema errors, 4 numeric failures.

Heavy imports happen inside the command handlers so that ``--threads``
(or the ``CMPS_THREADS`` environment variable) can pin the BLAS thread
pools before numpy is first loaded.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

__all__ = ["main", "build_parser", "PRESETS"]


class UsageError(Exception):
    """Command line misuse detected after argparse; exits with code 2."""


DATASETS = ("rotated-cube", "two-moons", "compressible", "xy", "iris")
FAMILIES = ("fourier", "legendre", "hermite", "laguerre")
METRICS = ("nll", "kl-entropy", "kl-knn", "kl-quadrature", "accuracy", "xy-marginals")

# Complete training protocols for the shipped experiments; explicit flags
# override individual entries.
PRESETS = {
    "rotated-cube-d1": dict(features="fourier", feat_dim=11, chi=11, sweeps=18,
                            step_size=0.1),
    "two-moons-d2": dict(features="fourier", feat_dim=17, chi=8, sweeps=18,
                         class_first=True),
    "iris-d3": dict(features="fourier", feat_dim=7, chi=9, sweeps=20),
    "xy-d4": dict(features="fourier", feat_dim=13, chi=12, sweeps=18),
    "compressible-d5": dict(features="legendre", feat_dim=16, chi=4, sweeps=18,
                            compress_dim=3),
}

_TRAIN_DEFAULTS = dict(
    features="fourier", feat_dim=8, chi=4, sweeps=10, inner_steps=4,
    step_size=0.05, chi_schedule=None, batch=None, seed=0, field="complex",
    compress_dim=None, shared_layer=False, layer_every=1, margin=0.05,
    class_first=False,
)


def _apply_threads(requested):
    """Pin worker pools; returns the cap (0 = library defaults)."""
    if requested is None:
        requested = os.environ.get("CMPS_THREADS") or None
    if requested is None:
        return 0
    n = int(requested)
    if n < 1:
        raise UsageError("--threads must be a positive integer")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    os.environ["CMPS_THREADS"] = str(n)
    return n


def _echo(tag: str, payload: dict) -> None:
    print(tag + " " + json.dumps(payload, sort_keys=True, default=str))


# --------------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    from .data import (gen_compressible, gen_rotated_cube, gen_two_moons,
                       gen_xy_model, load_iris, save_csv)

    name = args.dataset
    if name == "rotated-cube":
        ds = gen_rotated_cube(args.n, seed=args.seed)
    elif name == "two-moons":
        ds = gen_two_moons(args.n, sigma=args.sigma, seed=args.seed)
    elif name == "compressible":
        ds = gen_compressible(args.n, seed=args.seed)
    elif name == "xy":
        try:
            h, w = (int(v) for v in args.shape.lower().split("x"))
        except ValueError:
            raise UsageError(f"bad --shape {args.shape!r}; expected e.g. 4x4")
        ds = gen_xy_model(args.n, temperature=args.temperature, shape=(h, w),
                          burn_in=args.burn_in, thinning=args.thinning,
                          seed=args.seed, n_chains=args.chains)
    else:  # iris: vendored fixture, fixed size
        ds = load_iris()
        if args.n != ds.n_rows:
            print(f"note: iris is a fixed {ds.n_rows}-row table; --n ignored")
    save_csv(ds, args.out)
    print(f"wrote {ds.n_rows} rows (seed {ds.seed}) -> {args.out}")
    return 0


# ------------------------------------------------------------------- train

def _resolve_train(args) -> dict:
    cfg = dict(_TRAIN_DEFAULTS)
    if args.preset:
        cfg.update(PRESETS[args.preset])
    for key in _TRAIN_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["chi_schedule"] and isinstance(cfg["chi_schedule"], str):
        try:
            cfg["chi_schedule"] = [int(v) for v in cfg["chi_schedule"].split(",")]
        except ValueError:
            raise UsageError(f"bad --chi-schedule {cfg['chi_schedule']!r}")
    cfg["preset"] = args.preset
    return cfg


def _site_order(ds, cfg) -> list[int]:
    order = list(range(ds.n_cols))
    if cfg["class_first"]:
        cat = [k for k in order if ds.domains[k].is_discrete]
        order = cat + [k for k in order if not ds.domains[k].is_discrete]
    return order


def _build_inputs(ds, cfg):
    """Dataset -> (values in site order, feature maps, layer, site order).

    Columns on unbounded domains are affinely rescaled onto [0, 1] when the
    chosen family needs a finite interval; Fourier intervals get a margin
    so data extremes do not alias across the periodic seam.
    """
    import numpy as np

    from .compression import CompressionLayer
    from .data import rescale
    from .errors import DataError
    from .features import DomainTag, FeatureMap

    family = cfg["features"]
    if family == "fourier":
        # standardize onto the unit interval: keeps NLL units comparable
        # across datasets and matches the basis' natural period
        cols = [k for k in range(ds.n_cols)
                if ds.domains[k].kind in ("half_line", "real_line", "compact")]
        if cols:
            ds, _ = rescale(ds, [(0.0, 1.0)] * len(cols), columns=cols)
    elif family == "legendre":
        unbounded = [k for k in range(ds.n_cols)
                     if ds.domains[k].kind in ("half_line", "real_line")]
        if unbounded:
            ds, _ = rescale(ds, [(-1.0, 1.0)] * len(unbounded), columns=unbounded)

    order = _site_order(ds, cfg)
    maps = []
    for col in order:
        dom = ds.domains[col]
        if dom.is_discrete:
            maps.append(FeatureMap.categorical(dom.cardinality))
        elif family == "fourier":
            if dom.kind == "periodic":
                maps.append(FeatureMap.fourier(cfg["feat_dim"], dom))
            else:
                pad = cfg["margin"] * dom.length
                maps.append(FeatureMap.fourier(
                    cfg["feat_dim"], DomainTag.compact(dom.a - pad, dom.b + pad)))
        elif family == "legendre":
            maps.append(FeatureMap.legendre(
                cfg["feat_dim"], DomainTag.compact(dom.a, dom.b)))
        elif family == "hermite":
            maps.append(FeatureMap.hermite(cfg["feat_dim"]))
        else:
            maps.append(FeatureMap.laguerre(cfg["feat_dim"]))

    vals = np.ascontiguousarray(ds.values[:, order])
    for site, col in enumerate(order):
        ok = maps[site].domain.contains(vals[:, site])
        if not np.all(ok):
            bad = vals[~np.asarray(ok, bool), site][0]
            raise DataError(
                f"column {ds.column_names[col]!r}: value {bad!r} outside the "
                f"{family} domain {maps[site].domain.kind}"
                f"[{maps[site].domain.a:g}, {maps[site].domain.b:g}]")

    layer = None
    if cfg["compress_dim"]:
        if any(fm.domain.is_discrete for fm in maps):
            raise DataError("a compression layer needs all-continuous columns")
        layer = CompressionLayer.truncation(cfg["feat_dim"], cfg["compress_dim"],
                                            n_sites=len(maps),
                                            shared=cfg["shared_layer"])
    return ds, vals, maps, layer, order


def _fit(vals, maps, layer, cfg):
    from .compression import fit_compressed
    from .model import random_init
    from .trainer import TrainConfig, dmrg_fit

    model = random_init(maps, chi=cfg["chi"], seed=cfg["seed"],
                        field=cfg["field"], layer=layer)
    tc = TrainConfig(chi_max=cfg["chi"], sweeps=cfg["sweeps"],
                     inner_steps=cfg["inner_steps"], step_size=cfg["step_size"],
                     chi_schedule=cfg["chi_schedule"], batch=cfg["batch"],
                     seed=cfg["seed"], field=cfg["field"])
    if layer is not None:
        return fit_compressed(model, vals, tc, layer_every=cfg["layer_every"])
    return dmrg_fit(model, vals, tc)


def _domain_json(dom) -> dict:
    return {"kind": dom.kind, "a": dom.a, "b": dom.b,
            "cardinality": dom.cardinality}


def cmd_train(args) -> int:
    import numpy as np

    from .data import load_csv
    from .errors import NumericError
    from .model import canonicalize, normalize
    from .storage import save_model
    from .trainer import nll, write_loss_trace

    cfg = _resolve_train(args)
    _echo("train-config", cfg)
    ds = load_csv(args.data)
    ds, vals, maps, layer, order = _build_inputs(ds, cfg)
    model, trace = _fit(vals, maps, layer, cfg)
    model = normalize(canonicalize(model, 0))

    final = nll(model, vals)
    if not np.isfinite(final):
        raise NumericError("training diverged: non-finite final loss")
    save_model(model, args.out)

    trace_path = args.trace or (str(args.out) + ".trace.csv")
    write_loss_trace(trace_path, trace)

    sidecar = {
        "dataset": ds.name,
        "site_columns": [ds.column_names[c] for c in order],
        "permutation": order,
        "scaling": [[ds.scaling[c][0], ds.scaling[c][1]] for c in order],
        "domains": [_domain_json(ds.domains[c]) for c in order],
        "labels": ds.meta.get("classes"),
        "entropy": ds.entropy,
        "log_scale": ds.log_scale,
        "train": {k: v for k, v in cfg.items()},
        "final_nll_stored": final,
    }
    with open(str(args.out) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)

    print(f"final nll {final:.6f} (stored units) "
          f"{final - ds.log_scale:.6f} (original units)")
    print(f"wrote model -> {args.out} (trace {trace_path})")
    return 0


# ------------------------------------------------------------------ sample

def _load_ready(path):
    from .model import canonicalize, normalize
    from .storage import load_model

    return normalize(canonicalize(load_model(path), 0))


def _read_sidecar(model_path):
    p = Path(str(model_path) + ".json")
    if not p.exists():
        return None
    with open(p) as fh:
        return json.load(fh)


def cmd_sample(args) -> int:
    import numpy as np

    from .sampler import sample, sample_conditional

    m = _load_ready(args.model)
    side = _read_sidecar(args.model)
    n = m.n_sites
    names = side["site_columns"] if side else [f"x{k}" for k in range(n)]
    scaling = side["scaling"] if side else [[0.0, 1.0]] * n
    order = side["permutation"] if side else list(range(n))
    labels = (side or {}).get("labels")

    fixed = []
    if args.condition:
        idx = {name: i for i, name in enumerate(names)}
        picked = {}
        for item in args.condition.split(","):
            if "=" not in item:
                raise UsageError(f"bad --condition entry {item!r}; expected name=value")
            name, raw = item.split("=", 1)
            if name not in idx:
                raise UsageError(f"unknown column {name!r}; this model's site "
                                 f"order is {names}")
            picked[idx[name]] = raw
        sites = sorted(picked)
        if sites != list(range(len(sites))):
            raise UsageError(
                f"conditioning must cover the leading sites in order; this "
                f"model's site order is {names}")
        for s in sites:
            raw = picked[s]
            try:
                v = float(raw)
            except ValueError:
                dom = m.feature_maps[s].domain
                if labels and raw in labels and dom.is_discrete:
                    v = float(labels.index(raw))
                else:
                    raise UsageError(f"cannot parse condition value {raw!r}")
            off, scale = scaling[s]
            fixed.append((v - off) * scale)

    if fixed:
        draws = sample_conditional(m, fixed, seed=args.seed, count=args.count)
        rows = np.column_stack([np.tile(fixed, (args.count, 1)), draws])
    else:
        rows = sample(m, seed=args.seed, count=args.count)

    # back to the dataset's column order and original units
    out_cols = [None] * n
    for site in range(n):
        off, scale = scaling[site]
        col = rows[:, site] / scale + off
        dom = m.feature_maps[site].domain
        if dom.is_discrete and labels and len(labels) == dom.cardinality:
            col = np.asarray(labels, dtype=object)[col.astype(int)]
        out_cols[order[site]] = col
    header = [None] * n
    for site in range(n):
        header[order[site]] = names[site]

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in range(args.count):
            row = [out_cols[k][r] for k in range(n)]
            writer.writerow([v if isinstance(v, str) else f"{v:.17g}"
                             for v in row])
    print(f"wrote {args.count} rows -> {args.out}")
    return 0


# -------------------------------------------------------------------- eval

def _uniform_pdf_for(m):
    """Constant density over the model's (finite) domain product."""
    import numpy as np

    vol = 1.0
    for fm in m.feature_maps:
        dom = fm.domain
        if dom.is_discrete:
            vol *= dom.cardinality
        elif dom.kind in ("compact", "periodic"):
            vol *= dom.length
        else:
            raise UsageError("--true-pdf uniform needs finite domains on all sites")
    return lambda pts: np.full(pts.shape[0], 1.0 / vol)


def cmd_eval(args) -> int:
    import numpy as np

    from .data import kfold_indices, load_csv
    from .errors import DataError
    from .evaluation import kl_knn, kl_quadrature, write_metrics, xy_marginal_kl
    from .sampler import classify, sample
    from .trainer import nll

    if args.data is None and args.true_pdf and args.metrics == "nll":
        args.metrics = "kl-quadrature"   # the only metric a pdf alone supports
    wanted = []
    for name in args.metrics.split(","):
        name = name.strip()
        if name not in METRICS:
            raise UsageError(f"unknown metric {name!r}; pick from {METRICS}")
        wanted.append(name)
    if args.data is None and args.true_pdf is None:
        raise UsageError("need --data or --true-pdf")
    if "kl-quadrature" in wanted and args.true_pdf is None:
        raise UsageError("kl-quadrature needs --true-pdf")
    if args.data is None and any(w != "kl-quadrature" for w in wanted):
        raise UsageError("all metrics except kl-quadrature need --data")

    m = _load_ready(args.model)
    side = _read_sidecar(args.model)
    workers = int(os.environ.get("CMPS_THREADS", "0") or 0) or -1
    metrics: dict[str, float] = {}

    if args.true_pdf:
        try:
            metrics["kl_quadrature"] = kl_quadrature(m, _uniform_pdf_for(m))
        except ValueError as exc:
            raise UsageError(str(exc))

    draws = None
    if args.data:
        ds = load_csv(args.data)
        order = side["permutation"] if side else list(range(ds.n_cols))
        if ds.n_cols != m.n_sites or sorted(order) != list(range(ds.n_cols)):
            raise DataError(f"data has {ds.n_cols} columns; model expects "
                            f"{m.n_sites}")
        # map the data into the units the model was trained in
        if side and "scaling" in side:
            orig = ds.to_original()
            vals = np.empty_like(orig)
            log_scale = 0.0
            for site, col in enumerate(order):
                off, scale = side["scaling"][site]
                vals[:, site] = (orig[:, col] - off) * scale
                log_scale += np.log(abs(scale))
        else:
            vals = np.ascontiguousarray(ds.values[:, order])
            log_scale = ds.log_scale

        if "nll" in wanted or "kl-entropy" in wanted:
            stored = nll(m, vals)
            metrics["nll_stored"] = stored
            metrics["nll"] = stored - log_scale
        if "kl-entropy" in wanted:
            if ds.entropy is None:
                raise DataError("dataset carries no entropy; kl-entropy "
                                "is not available")
            metrics["kl_vs_entropy"] = metrics["nll"] - ds.entropy
        if "kl-knn" in wanted or "xy-marginals" in wanted:
            draws = sample(m, seed=args.seed, count=args.knn_samples)
        if "kl-knn" in wanted:
            doms = [m.feature_maps[i].domain for i in range(m.n_sites)]
            periodic = all(d.kind == "periodic" for d in doms)
            metrics["kl_knn"] = kl_knn(vals, draws, k=args.knn_k,
                                       domains=doms if periodic else None,
                                       workers=workers)
        if "xy-marginals" in wanted:
            if vals.shape[1] != 16:
                raise DataError("xy-marginals needs a 16-column dataset")
            out = xy_marginal_kl(vals, draws, k=args.knn_k)
            metrics["kl_corner"] = out["corn"]
            metrics["kl_neighbor"] = out["neigh"]
        if "accuracy" in wanted:
            fm = m.feature_maps[-1]
            if not fm.domain.is_discrete:
                raise DataError("accuracy needs a categorical last site")
            probs = classify(m, vals[:, :-1])
            metrics["accuracy"] = float(np.mean(
                np.argmax(probs, axis=1) == vals[:, -1].astype(int)))

        if args.folds:
            if side is None or "train" not in side:
                raise DataError("k-fold retraining needs the model's sidecar "
                                "config next to the model file")
            cfg = dict(_TRAIN_DEFAULTS)
            cfg.update({k: v for k, v in side["train"].items() if k in cfg})
            # one shared preprocessing pass so every fold sees the same units
            prepped, pvals, pmaps, player, _ = _build_inputs(ds, cfg)
            labels_col = (ds.values[:, -1].astype(int)
                          if ds.domains[-1].is_discrete else None)
            folds = kfold_indices(ds.n_rows if labels_col is None else labels_col,
                                  k=args.folds, seed=cfg["seed"])
            val_nll, val_stored, val_acc = [], [], []
            for train_idx, val_idx in folds:
                fold_model, _ = _fit(pvals[train_idx], pmaps, player, cfg)
                hold = pvals[val_idx]
                val_stored.append(nll(fold_model, hold))
                val_nll.append(val_stored[-1] - prepped.log_scale)
                if pmaps[-1].domain.is_discrete:
                    from .model import canonicalize, normalize
                    ready = normalize(canonicalize(fold_model, 0))
                    probs = classify(ready, hold[:, :-1])
                    val_acc.append(float(np.mean(
                        np.argmax(probs, axis=1) == hold[:, -1].astype(int))))
            metrics["nll_val_mean"] = float(np.mean(val_nll))
            metrics["nll_val_std"] = float(np.std(val_nll, ddof=1))
            metrics["nll_val_stored_mean"] = float(np.mean(val_stored))
            if val_acc:
                metrics["accuracy_mean"] = float(np.mean(val_acc))

    for name, value in metrics.items():
        print(f"{name} = {value:.6f}")
    if args.out:
        cfg_echo = {k: v for k, v in vars(args).items() if k != "func"}
        write_metrics(args.out, metrics, cfg_echo)
        print(f"wrote metrics -> {args.out}")
    return 0


# ----------------------------------------------------------------- inspect

def cmd_inspect(args) -> int:
    import math

    from .model import norm_sq
    from .storage import load_model

    m = load_model(args.model)
    print(f"sites: {m.n_sites}")
    print("bonds: " + "-".join(str(c.shape[2]) for c in m.cores[:-1]))
    for i, fm in enumerate(m.feature_maps):
        d = m.cores[i].shape[1]
        dom = fm.domain
        where = (f"{{0..{dom.cardinality - 1}}}" if dom.is_discrete
                 else f"{dom.kind}[{dom.a:g}, {dom.b:g}]")
        fam = "categorical" if dom.is_discrete else fm.family
        extra = f" -> d={d}" if d != fm.dim else ""
        print(f"site {i}: {fam} D={fm.dim}{extra} on {where}")
    if m.layer is None:
        print("compression: none")
    else:
        print(f"compression: {'shared' if m.layer.shared else 'per-site'}")
    print(f"center: {m.center if m.center is not None else 'none'}")
    print(f"norm: {math.sqrt(norm_sq(m)):.12g}")
    print(f"field: {m.field}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cmps",
        description="Tensor-network density models on continuous variables: "
                    "dataset generation, training, sampling, evaluation.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap worker threads (also: CMPS_THREADS env var)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset CSV")
    g.add_argument("dataset", choices=DATASETS)
    g.add_argument("--n", type=int, default=10000, help="rows to generate")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--sigma", type=float, default=0.1, help="two-moons noise")
    g.add_argument("--temperature", type=float, default=0.8, help="xy lattice")
    g.add_argument("--shape", default="4x4", help="xy lattice shape")
    g.add_argument("--burn-in", type=int, default=500, help="xy MCMC burn-in")
    g.add_argument("--thinning", type=int, default=10, help="xy MCMC thinning")
    g.add_argument("--chains", type=int, default=64, help="xy MCMC chains")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit a model to a dataset CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--features", choices=FAMILIES)
    t.add_argument("--feat-dim", type=int, dest="feat_dim")
    t.add_argument("--chi", type=int)
    t.add_argument("--chi-schedule", dest="chi_schedule",
                   help="comma list of per-sweep bond caps")
    t.add_argument("--sweeps", type=int)
    t.add_argument("--inner-steps", type=int, dest="inner_steps")
    t.add_argument("--step-size", type=float, dest="step_size")
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--field", choices=("complex", "real"))
    t.add_argument("--compress-dim", type=int, dest="compress_dim",
                   help="train a feature-compression layer down to this d")
    t.add_argument("--shared-layer", action="store_const", const=True,
                   default=None, dest="shared_layer")
    t.add_argument("--layer-every", type=int, dest="layer_every")
    t.add_argument("--margin", type=float,
                   help="fourier interval padding as a fraction of the span")
    t.add_argument("--class-first", action="store_const", const=True,
                   default=None, dest="class_first",
                   help="put categorical columns first in the site order")
    t.add_argument("--trace", help="loss trace CSV path")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw rows from a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--condition", help="name=value[,name=value...] on leading sites")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score a model against data or a known pdf")
    e.add_argument("--model", required=True)
    e.add_argument("--data")
    e.add_argument("--true-pdf", choices=("uniform",), dest="true_pdf")
    e.add_argument("--metrics", default="nll",
                   help="comma list: " + ",".join(METRICS))
    e.add_argument("--knn-samples", type=int, default=20000, dest="knn_samples")
    e.add_argument("--knn-k", type=int, default=10, dest="knn_k")
    e.add_argument("--folds", type=int,
                   help="retrain per fold with the sidecar config and report "
                        "mean/std validation NLL")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="metrics CSV path")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print a model file summary")
    i.add_argument("--model", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _apply_threads(args.threads)
        cfg = {k: v for k, v in vars(args).items() if k != "func"}
        cfg["threads"] = threads
        _echo("config", cfg)
        from .errors import CmpsError
        try:
            return int(args.func(args) or 0)
        except CmpsError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return int(getattr(exc, "exit_code", 3))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
