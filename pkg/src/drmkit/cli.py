"""``drmkit`` command line.

Exit codes: 0 success, 1 usage error, 2 validation or file error,
3 numerical failure. Every command is deterministic given its arguments.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import io
from .deep import (PatchLayout, activity_maximize, class_templates, em_train_deep, f2c_certificate,
                   infer_f2c, infer_f2c_meanpool, patch_score, random_deep)
from .errors import DRMError, NumericalError
from .forest import Forest, TreeConfig, forest_infer, forest_train
from .model import DeepRM, EvoDRM, ShallowRM, collapse, path_to_index
from .oracle import exact_map, exact_marginal
from .relax import FeedforwardNet, TrainConfig, relax, sgd_train
from .shallow import (dropout_em_train, em_train, init_from_data, ms_classify, sp_classify,
                      sp_log_offset)
from .workbench import (generate, net_representations, path_targets, probe, random_evo,
                        random_shallow, rise_then_fall, spearman)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def write_json(path, obj):
    io.atomic_write(path, (json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n").encode())


def _ints(text, name):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{name} must be comma-separated integers, got {text!r}")


# --- commands -------------------------------------------------------------------

def cmd_random_model(a):
    if a.family == "shallow":
        C, G, D = _ints(a.shape, "--shape")
        m = random_shallow(C, G, D, a.seed, a.noise)
    elif a.family == "deep":
        dims = _ints(a.dims, "--dims")
        nuis = _ints(a.nuisances, "--nuisances")
        m = random_deep(dims, nuis, a.classes, a.seed, level_noise=a.noise, pixel_noise=a.noise)
    else:
        nuis = _ints(a.nuisances, "--nuisances")
        m = random_evo(a.classes, nuis, a.dim, a.seed, a.noise)
    io.save(m, a.out)


def cmd_generate(a):
    model = io.load(a.model, (ShallowRM, DeepRM, EvoDRM))
    io.save_dataset(generate(model, a.n, a.seed), a.out)


def cmd_train_em(a):
    ds = io.load_dataset(a.data)
    X = ds.flat
    labels = ds.labels if a.supervised else None
    if a.engine == "shallow":
        if a.init.startswith("random:"):
            K = int(a.init.split(":", 1)[1])
            C = int(ds.labels.max() + 1) if a.classes is None else a.classes
            init = init_from_data(X, C, K, a.seed, labels, image_shape=ds.images.shape[1:])
        else:
            init = io.load(a.init, ShallowRM)
        if a.dropout is not None:
            res = dropout_em_train(X, init, a.iters, a.dropout, a.masks, a.seed, labels)
        else:
            res = em_train(X, init, a.iters, labels)
        trace = [float(v) for v in res.trace]
    else:
        if a.init.startswith("random:"):
            raise UsageError("the deep engine needs an --init model file")
        if a.dropout is not None:
            raise UsageError("--dropout applies to the shallow engine only")
        res = em_train_deep(X, io.load(a.init, DeepRM), a.iters)
        trace = res.trace
    io.save(res.model, a.out)
    if a.trace:
        write_json(a.trace, {"engine": a.engine, "iters": a.iters, "log_likelihood": trace})


def cmd_train_forest(a):
    ds = io.load_dataset(a.data)
    cfg = TreeConfig(depth=a.depth, candidates=a.candidates, min_size=a.min_size)
    forest = forest_train(ds.flat, ds.labels, a.trees, cfg, a.seed, n_labels=int(ds.labels.max() + 1))
    io.save(forest, a.out)


def cmd_train_sgd(a):
    ds = io.load_dataset(a.data)
    net = io.load(a.net, FeedforwardNet)
    res = sgd_train(net, ds.flat, ds.labels, TrainConfig(a.lr, a.batch, a.epochs, a.seed))
    io.save(res.net, a.out)
    if a.trace:
        write_json(a.trace, {"epochs": a.epochs, "loss": [float(v) for v in res.trace]})


def _predictions(a, X):
    if a.net:
        if a.mode != "ms":
            raise UsageError("nets support --mode ms only")
        return io.load(a.net, FeedforwardNet).predict(X), "net"
    if a.forest:
        if a.mode != "ms":
            raise UsageError("forests support --mode ms only")
        f = io.load(a.forest, Forest)
        return np.array([int(np.argmax(forest_infer(f, x))) for x in X]), "forest"
    model = io.load(a.model, (ShallowRM, DeepRM, EvoDRM))
    if a.mode == "meanpool":
        if not isinstance(model, DeepRM):
            raise UsageError("meanpool needs a DeepRM")
        return np.array([int(np.argmax(infer_f2c_meanpool(model, x))) for x in X]), "model"
    if isinstance(model, DeepRM) and a.mode == "ms":
        return np.array([infer_f2c(model, x).class_id for x in X]), "model"
    sh = model if isinstance(model, ShallowRM) else collapse(model)
    fn = ms_classify if a.mode == "ms" else sp_classify
    return np.array([fn(sh, x).class_id for x in X]), "model"


def cmd_infer(a):
    ds = io.load_dataset(a.data)
    pred, source = _predictions(a, ds.flat)
    write_json(a.out, {"source": source, "mode": a.mode, "n": int(ds.n),
                       "accuracy": float(np.mean(pred == ds.labels)),
                       "predictions": [int(p) for p in pred]})


def cmd_relax(a):
    model = io.load(a.model, (ShallowRM, DeepRM))
    io.save(relax(model, switching=a.switching, switch_prior=a.switch_prior), a.out)


def cmd_actmax(a):
    h, w, s = _ints(a.patches, "--patches")
    if a.model:
        model = io.load(a.model, (ShallowRM, DeepRM, EvoDRM))
    else:
        model = io.load(a.net, FeedforwardNet)
    layout = PatchLayout(h, w, s)
    img = activity_maximize(model, a.class_id, layout)
    t, shape = class_templates(model, a.class_id)
    score = patch_score(t, layout.patches(shape), img)
    write_json(a.out, {"class": a.class_id, "patches": [h, w, s], "score": score,
                       "image": io.encode_array(img)})


def cmd_probe(a):
    ds = io.load_dataset(a.data)
    if ds.paths is None:
        raise DRMError("probing needs a dataset with recorded paths")
    net = io.load(a.net, FeedforwardNet)
    rep = probe(net_representations(net, ds.flat), path_targets(ds), seed=a.seed)
    out = rep.to_dict()
    out["class_spearman"] = spearman(rep.profile("c"))
    out["rise_then_fall"] = {v: rise_then_fall(rep.profile(v)) for v in rep.variables if v != "c"}
    write_json(a.out, out)


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def cmd_oracle_check(a):
    ds = io.load_dataset(a.data)
    model = io.load(a.model, (ShallowRM, DeepRM, EvoDRM))
    sh = model if isinstance(model, ShallowRM) else collapse(model)
    op = a.engine_op
    agree, certified, errs, mism = 0, 0, [], []
    for i, x in enumerate(ds.flat):
        if op == "ms_classify":
            ok = ms_classify(sh, x).best_path == exact_map(sh, x)[0]
        elif op == "sp_classify":
            got = sp_classify(sh, x).scores + sp_log_offset(sh, x)
            want = exact_marginal(sh, x)
            errs.append(max(_rel(float(g), float(w)) for g, w in zip(got, want)))
            ok = errs[-1] <= 1e-9
        elif op == "infer_f2c":
            if not isinstance(model, DeepRM):
                raise UsageError("infer_f2c needs a DeepRM")
            r = infer_f2c(model, x)
            certified += f2c_certificate(model, x).exact
            cfg = (r.path.class_id, path_to_index(model, r.path.nuisance_ids))
            ok = cfg == exact_map(sh, x)[0]
        elif op == "relax":
            if isinstance(model, EvoDRM):
                raise UsageError("relax needs a ShallowRM or DeepRM")
            net = relax(model)
            want = (ms_classify(model, x).class_id if isinstance(model, ShallowRM)
                    else infer_f2c(model, x).class_id)
            ok = int(net.predict(x[None])[0]) == want
        else:
            raise UsageError(f"unknown engine op {op!r}")
        agree += bool(ok)
        if not ok:
            mism.append(i)
    report = {"engine_op": op, "n": int(ds.n), "agreement_rate": agree / ds.n,
              "mismatches": mism[:50]}
    if errs:
        report["max_rel_error"] = max(errs)
    if op == "infer_f2c":
        report["certified_rate"] = certified / ds.n
    write_json(a.report, report)


# --- parser -----------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="drmkit", description="Rendering-model workbench")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("random-model", help="write a random model file")
    s.add_argument("--family", choices=["shallow", "deep", "evo"], required=True)
    s.add_argument("--shape", default="2,2,4", help="C,G,D for shallow models")
    s.add_argument("--dims", default="2,4,8", help="top-to-bottom dimensions for deep models")
    s.add_argument("--nuisances", default="2,2", help="nuisances per level, top first")
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--dim", type=int, default=8, help="image dimension for evo models")
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_random_model)

    s = sub.add_parser("generate", help="sample a dataset from a model")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("train-em", help="hard EM for shallow or deep models")
    s.add_argument("--engine", choices=["shallow", "deep"], required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--init", required=True, help="model file or random:K (K nuisances per class)")
    s.add_argument("--iters", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dropout", type=float)
    s.add_argument("--masks", type=int, default=1)
    s.add_argument("--classes", type=int, help="classes for random init (default: from labels)")
    s.add_argument("--supervised", action="store_true", help="clamp classes to dataset labels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trace", help="write the per-iteration likelihood trace here")
    s.set_defaults(fn=cmd_train_em)

    s = sub.add_parser("train-forest", help="bagged InfoMax decision forest")
    s.add_argument("--data", required=True)
    s.add_argument("--trees", type=int, required=True)
    s.add_argument("--depth", type=int, required=True)
    s.add_argument("--candidates", type=int, required=True)
    s.add_argument("--min-size", type=int, default=2)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_forest)

    s = sub.add_parser("train-sgd", help="discriminative training of a relaxed net")
    s.add_argument("--net", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--lr", type=float, required=True)
    s.add_argument("--batch", type=int, required=True)
    s.add_argument("--epochs", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(fn=cmd_train_sgd)

    s = sub.add_parser("infer", help="classify a dataset and report accuracy")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--net")
    g.add_argument("--forest")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=["ms", "sp", "meanpool"], default="ms")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("relax", help="convert a model into a feedforward net")
    s.add_argument("--model", required=True)
    s.add_argument("--switching", action="store_true")
    s.add_argument("--switch-prior", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_relax)

    s = sub.add_parser("actmax", help="class-maximizing image from patchwise templates")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--net")
    s.add_argument("--class", dest="class_id", type=int, required=True)
    s.add_argument("--patches", required=True, help="h,w,stride")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_actmax)

    s = sub.add_parser("probe", help="linear probes of every net layer")
    s.add_argument("--net", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_probe)

    s = sub.add_parser("oracle-check", help="compare a fast path against enumeration")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--engine-op", required=True,
                   choices=["ms_classify", "sp_classify", "infer_f2c", "relax"])
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # --help, or a usage error already reported
        return int(exc.code or 0)
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"drmkit: usage error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError, OverflowError) as exc:
        print(f"drmkit: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DRMError, ValueError, OSError) as exc:
        print(f"drmkit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
