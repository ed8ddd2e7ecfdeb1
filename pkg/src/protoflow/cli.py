"""Command-line interface: ``protoflow {train,eval,explain,prune,sample,interpolate,rot-test}``.

Errors exit non-zero with one line ``error: <code>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from typing import List, Optional, Tuple

import numpy as np
import torch

from . import config as cfgmod
from . import interpret, metrics
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import (CONTINUOUS, QUANTIZED, Dataset, IDXFormatError, downscale, load_csv,
                   load_idx, logit_range, make_gaussian_grid, make_two_moons, model_inputs)
from .estimator import ProtoFlowClassifier
from .head import most_likely_prototype
from .numerics import RngStream
from .training import TrainingDiverged, restore

logger = logging.getLogger("protoflow")

EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "runtime": 6}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- datasets -----------------------------------------------------------------

def _idx_pair(root, prefix):
    for ext in (".gz", ""):
        imgs = os.path.join(root, f"{prefix}-images-idx3-ubyte{ext}")
        labs = os.path.join(root, f"{prefix}-labels-idx1-ubyte{ext}")
        if os.path.exists(imgs) and os.path.exists(labs):
            return imgs, labs
    raise CliError("data", f"missing IDX files {prefix}-images/labels in {root!r}")


def load_datasets(cfg) -> Tuple[Dataset, Dataset]:
    """``(train, test)`` for the ``[data]`` section."""
    d = cfg["data"]
    rng = RngStream(d["seed"])
    kind = d["dataset"]
    try:
        if kind == "two-moons":
            train = make_two_moons(d["n_train"], d["noise"], rng.derive(0))
            test = make_two_moons(d["n_test"], d["noise"], rng.derive(1))
        elif kind == "gaussian-grid":
            train = make_gaussian_grid(d["n_train"], rng=rng.derive(0))
            test = make_gaussian_grid(d["n_test"], rng=rng.derive(1))
        elif kind in ("mnist14", "mnist28", "idx"):
            if not os.path.isdir(d["path"]):
                raise CliError("data", f"dataset directory not found: {d['path']!r}")
            train = load_idx(*_idx_pair(d["path"], "train"), num_classes=10 if kind != "idx" else None)
            test = load_idx(*_idx_pair(d["path"], "t10k"), num_classes=train.num_classes)
            if kind == "mnist14":
                train, test = downscale(train, 2), downscale(test, 2)
        elif kind == "csv":
            if not os.path.exists(d["path"]):
                raise CliError("data", f"dataset file not found: {d['path']!r}")
            train = load_csv(d["path"])
            test = load_csv(d["test_path"], train.num_classes) if d["test_path"] else train
        else:
            raise CliError("config", f"[data] dataset: unknown dataset {kind!r}")
    except (IDXFormatError, OSError) as err:
        raise CliError("data", str(err)) from None
    if d["train_subset"] and d["train_subset"] < len(train):
        train = train.subset(np.sort(rng.derive(2).permutation(len(train))[:d["train_subset"]]))
    return train, test


def _estimator_kwargs(cfg, train: Dataset):
    params = cfgmod.estimator_params(cfg)
    params["image_shape"] = train.image_shape
    params["quantized"] = train.value_domain == QUANTIZED
    return params


def _checkpoint_for(est: ProtoFlowClassifier, cfg, state=None, meta=None) -> Checkpoint:
    model, head, ema = est.model_, est.head_, est.ema_
    if state is not None:
        import copy
        model, head, ema = copy.deepcopy(model), copy.deepcopy(head), copy.deepcopy(ema)
        restore(model, head, ema, state)
    return Checkpoint(model, head, ema, cfg, None, meta or {})


def _estimator_from(ckpt: Checkpoint, use_ema: Optional[bool] = None) -> ProtoFlowClassifier:
    cfg = ckpt.config
    params = cfgmod.estimator_params(cfg)
    meta = ckpt.meta
    params["image_shape"] = tuple(meta["image_shape"]) if meta.get("image_shape") else None
    params["quantized"] = meta.get("value_domain") == QUANTIZED
    if use_ema is not None:
        params["use_ema"] = use_ema
    if ckpt.ema is None:
        params["use_ema"] = False
    return ProtoFlowClassifier.from_modules(ckpt.model, ckpt.head, ckpt.ema,
                                            meta.get("classes"), **params)


def _open_checkpoint(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise CliError("checkpoint", f"checkpoint not found: {path!r}") from None
    except (CheckpointError, ValueError, KeyError) as err:
        raise CliError("checkpoint", str(err)) from None


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _output_dir(cfg, override: Optional[str]) -> str:
    out = override or os.environ.get("PROTOFLOW_OUTPUT_DIR") or cfg["output"]["dir"]
    os.makedirs(out, exist_ok=True)
    return out


def _load_config(args):
    if args.config:
        if not os.path.exists(args.config):
            raise CliError("config", f"config file not found: {args.config!r}")
        cfg = cfgmod.load(args.config, args.preset)
    elif args.preset:
        cfg = cfgmod.preset(args.preset)
        cfg["run"]["preset"] = args.preset
    else:
        raise CliError("usage", "give a config file or --preset")
    return cfgmod.apply_overrides(cfg, args.set)


# -- commands -------------------------------------------------------------------

LOG_COLUMNS = ("epoch", "step", "ce", "cr", "div", "elbo", "total", "lr", "grad_norm",
               "val_acc", "val_bpd")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train, test = load_datasets(cfg)
    out = _output_dir(cfg, args.out)
    with open(os.path.join(out, "config.ini"), "w") as f:
        f.write(cfgmod.dumps(cfg))
    est = ProtoFlowClassifier(**_estimator_kwargs(cfg, train))
    try:
        est.fit(train.samples, train.labels)
    except TrainingDiverged as err:
        raise CliError("runtime", str(err)) from None
    meta = {"image_shape": list(train.image_shape) if train.image_shape else None,
            "value_domain": train.value_domain, "classes": [int(c) for c in est.classes_],
            "n_train": len(train)}
    save_checkpoint(os.path.join(out, "final.pflw"), _checkpoint_for(est, cfg, meta=meta))
    if est.best_state_ is not None:
        save_checkpoint(os.path.join(out, "best.pflw"),
                        _checkpoint_for(est, cfg, est.best_state_, meta))
    _write_csv(os.path.join(out, "train_log.csv"), LOG_COLUMNS,
               [[row.get(c, "") for c in LOG_COLUMNS] for row in est.log_])
    test_acc = est.score(test.samples, test.labels)
    val_acc = est.history_[-1].get("val_acc") if est.history_ else None
    print(json.dumps({"checkpoint": os.path.join(out, "final.pflw"), "test_accuracy": test_acc,
                      "val_accuracy": val_acc}, sort_keys=True))
    return 0


def _eval_data(ckpt: Checkpoint, args) -> Dataset:
    cfg = ckpt.config
    if getattr(args, "preset", None) or getattr(args, "config", None):
        cfg = _load_config(args)
    train, test = load_datasets(cfg)
    return (train if getattr(args, "split", "test") == "train" else test), train


def cmd_eval(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    est = _estimator_from(ckpt, use_ema=not args.raw)
    data, _ = _eval_data(ckpt, args)
    ev = ckpt.config["eval"]
    report = metrics.evaluate(est.eval_model_, est.eval_head_, data, ev["bins"], ev["noise_s"],
                              args.seed if args.seed is not None else ev["seed"],
                              per_class=args.per_class)
    if args.json:
        with open(args.json, "w") as f:
            f.write(report.to_json())
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv())
    if args.matrices:
        os.makedirs(args.matrices, exist_ok=True)
        m, ids = metrics.pairwise_hellinger_matrix(est.eval_head_)
        _write_csv(os.path.join(args.matrices, "hellinger.csv"),
                   ["prototype"] + [f"{c}:{k}" for c, k in ids],
                   [[f"{c}:{k}"] + [repr(float(v)) for v in row] for (c, k), row in zip(ids, m)])
        dist, q = metrics.nearest_prototype_distances(est.eval_model_, est.eval_head_, data)
        _write_csv(os.path.join(args.matrices, "nearest_distances.csv"), ["index", "distance"],
                   [[i, repr(float(v))] for i, v in enumerate(dist)])
        _write_csv(os.path.join(args.matrices, "nearest_quartiles.csv"), ["q25", "q50", "q75"],
                   [[repr(float(v)) for v in q]])
    print(report.to_json())
    return 0


def cmd_prune(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    est = _estimator_from(ckpt)
    data, _ = _eval_data(ckpt, args)
    before = est.score(data.samples, data.labels)
    n_before = int(est.head_.active.sum())
    records = est.prune(args.bins)
    after = est.score(data.samples, data.labels)
    n_after = int(est.head_.active.sum())
    save_checkpoint(args.out, Checkpoint(ckpt.model, ckpt.head, ckpt.ema, ckpt.config,
                                         ckpt.rng_state, ckpt.meta))
    report = args.report or os.path.splitext(args.out)[0] + "_prune.csv"
    _write_csv(report, ["class", "component", "weight", "kept"],
               [[r.c, r.k, repr(r.weight), int(r.kept)] for r in records])
    print(json.dumps({"accuracy_before": before, "accuracy_after": after,
                      "components_before": n_before, "components_after": n_after,
                      "kept": n_after, "report": report}, sort_keys=True))
    return 0


def _render(est, x, meta, lo=None, hi=None):
    shape = tuple(meta["image_shape"])
    return interpret.to_uint8(x, meta.get("value_domain", CONTINUOUS), shape, lo, hi)


def _truncations(text) -> List[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _emit_vectors(path_base, vectors, meta, est, ncols=8):
    """PGM/PPM grid for image data, CSV otherwise.  Returns the written path."""
    vectors = np.atleast_2d(vectors)
    if meta.get("image_shape"):
        shape = tuple(meta["image_shape"])
        imgs = [_render(est, v, meta) for v in vectors]
        ext = ".pgm" if shape[2] == 1 else ".ppm"
        path = path_base + ext
        interpret.write_pnm(path, interpret.image_grid(imgs, min(ncols, len(imgs))))
    else:
        path = path_base + ".csv"
        _write_csv(path, [f"x{i}" for i in range(vectors.shape[1])],
                   [[repr(float(v)) for v in row] for row in vectors])
    return path


def _do_samples(est, ckpt, out, truncs, n, seed) -> List[str]:
    written = []
    rng = RngStream(seed, 11)
    for c, k in est.eval_head_.active_pairs():
        for t in truncs:
            xs = interpret.prototype_samples(est.eval_model_, est.eval_head_, c, k, t, n,
                                             rng.derive(c * 1000 + k))
            tag = "inf" if math.isinf(t) else f"{t:g}"
            written.append(_emit_vectors(os.path.join(out, f"samples_c{c}_k{k}_t{tag}"), xs,
                                         ckpt.meta, est))
    return written


def _do_interpolate(est, ckpt, data, out, i, j, steps) -> str:
    x, _ = model_inputs(data)
    path = interpret.interpolate(est.eval_model_, x[i], x[j], steps)
    return _emit_vectors(os.path.join(out, f"interp_{i}_{j}"), path, ckpt.meta, est, steps)


def _rot(est, ckpt, data, train, n_images, seed, patch, stride, batch_restore):
    shape = data.image_shape
    if shape is None:
        raise CliError("data", "relevance ordering needs image data")
    x, _ = model_inputs(data)
    bg = interpret.mean_input(train)
    z = interpret.embed(est.eval_model_, x[:n_images])
    protos = most_likely_prototype(est.eval_head_, z)
    lo, hi = logit_range() if data.value_domain == QUANTIZED else (x.min(), x.max())
    rng = RngStream(seed, 13)
    model_curves, random_curves = [], []
    for i in range(min(n_images, len(x))):
        c, k = (int(v) for v in protos[i])
        hm = interpret.parts_heatmap(est.eval_model_, est.eval_head_, None, x[i], c, k,
                                     patch, stride or patch, shape, bg, query=i)
        mc, rc = interpret.relevance_ordering_test(est.eval_model_, est.eval_head_, x[i], hm,
                                                   shape, rng.derive(i), batch_restore, (lo, hi))
        model_curves.append(mc)
        random_curves.append(rc)
    return model_curves, random_curves


def _write_rot(path, model_curves, random_curves) -> dict:
    steps = model_curves[0].pixels_restored
    m = np.mean([c.log_likelihood for c in model_curves], 0)
    r = np.mean([c.log_likelihood for c in random_curves], 0)
    _write_csv(path, ["step", "model_ll", "random_ll"],
               [[int(s), repr(float(a)), repr(float(b))] for s, a, b in zip(steps, m, r)])
    return {"curve": path, "model_area": float(np.mean([c.area() for c in model_curves])),
            "random_area": float(np.mean([c.area() for c in random_curves])),
            "n_images": len(model_curves)}


def cmd_explain(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    est = _estimator_from(ckpt)
    ev = ckpt.config["eval"]
    out = args.out
    os.makedirs(out, exist_ok=True)
    wants_data = args.interpolate or args.heatmaps or args.rot or args.most_likely
    data = train = None
    if wants_data:
        data, train = _eval_data(ckpt, args)
    if (args.heatmaps or args.rot) and not ckpt.meta.get("image_shape"):
        raise CliError("data", "heatmaps need image data")
    summary = {"written": []}
    m, h = est.eval_model_, est.eval_head_
    if args.means:
        for c, k in h.active_pairs():
            x = interpret.prototype_mean_image(m, h, c, k)
            summary["written"].append(_emit_vectors(os.path.join(out, f"mean_c{c}_k{k}"), x,
                                                    ckpt.meta, est))
    if args.samples:
        summary["written"] += _do_samples(est, ckpt, out, _truncations(args.truncation or ev["truncation"]),
                                          args.n or ev["n_samples"], ev["seed"])
    if args.interpolate:
        summary["written"].append(_do_interpolate(est, ckpt, data, out, args.i, args.j,
                                                  args.steps or ev["interp_steps"]))
    if args.most_likely:
        rows = [[c, interpret.most_likely_image(m, h, data, c)] for c in range(h.n_classes)]
        path = os.path.join(out, "most_likely.csv")
        _write_csv(path, ["class", "index"], rows)
        summary["written"].append(path)
        x, _ = model_inputs(data)
        summary["written"].append(_emit_vectors(os.path.join(out, "most_likely_inputs"),
                                                x[[r[1] for r in rows]], ckpt.meta, est))
    if args.heatmaps:
        x, _ = model_inputs(data)
        bg = interpret.mean_input(train)
        shape = data.image_shape
        for i in range(min(args.n_images, len(x))):
            z = interpret.embed(m, x[i:i + 1])
            c, k = (int(v) for v in most_likely_prototype(h, z)[0])
            hm = interpret.parts_heatmap(m, h, None, x[i], c, k, ev["patch"],
                                         ev["stride"] or ev["patch"], shape, bg, query=i)
            lo, hi = hm.values.min(), hm.values.max()
            img = np.rint((hm.values - lo) / max(hi - lo, 1e-12) * 255).astype(np.uint8)
            p = os.path.join(out, f"heatmap_{i}_c{c}_k{k}.pgm")
            interpret.write_pnm(p, img)
            mask = interpret.top_percent_mask(hm, 0.05).astype(np.uint8) * 255
            p2 = os.path.join(out, f"top5_{i}_c{c}_k{k}.pgm")
            interpret.write_pnm(p2, mask)
            summary["written"] += [p, p2]
    if args.rot:
        mc, rc = _rot(est, ckpt, data, train, args.n_images, ev["seed"], ev["patch"],
                      ev["stride"], ev["batch_restore"])
        summary["rot"] = _write_rot(os.path.join(out, "rot_curve.csv"), mc, rc)
        summary["written"].append(summary["rot"]["curve"])
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_sample(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    est = _estimator_from(ckpt)
    os.makedirs(args.out, exist_ok=True)
    xs = interpret.prototype_samples(est.eval_model_, est.eval_head_, args.c, args.k, args.t,
                                     args.n, RngStream(args.seed, 17))
    tag = "inf" if math.isinf(args.t) else f"{args.t:g}"
    path = _emit_vectors(os.path.join(args.out, f"samples_c{args.c}_k{args.k}_t{tag}"), xs,
                         ckpt.meta, est)
    print(json.dumps({"written": [path]}))
    return 0


def cmd_interpolate(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    est = _estimator_from(ckpt)
    data, _ = _eval_data(ckpt, args)
    os.makedirs(args.out, exist_ok=True)
    path = _do_interpolate(est, ckpt, data, args.out, args.i, args.j, args.steps)
    print(json.dumps({"written": [path]}))
    return 0


def cmd_rot_test(args) -> int:
    ckpt = _open_checkpoint(args.checkpoint)
    est = _estimator_from(ckpt)
    if not ckpt.meta.get("image_shape"):
        raise CliError("data", "relevance ordering needs image data")
    data, train = _eval_data(ckpt, args)
    ev = ckpt.config["eval"]
    mc, rc = _rot(est, ckpt, data, train, args.n_images, ev["seed"], ev["patch"], ev["stride"],
                  args.batch_restore or ev["batch_restore"])
    print(json.dumps(_write_rot(args.out, mc, rc), sort_keys=True))
    return 0


# -- parser ---------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protoflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=0, help="torch threads (0 = all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    def data_opts(sp):
        sp.add_argument("--config", help="config file selecting the evaluation data")
        sp.add_argument("--preset", help="preset selecting the evaluation data")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--split", choices=("train", "test"), default="test")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("config", nargs="?")
    t.add_argument("--preset")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    data_opts(e)
    g = e.add_mutually_exclusive_group()
    g.add_argument("--ema", action="store_true", help="evaluate EMA weights (default)")
    g.add_argument("--raw", action="store_true", help="evaluate raw weights")
    e.add_argument("--per-class", action="store_true")
    e.add_argument("--seed", type=int)
    e.add_argument("--json")
    e.add_argument("--csv")
    e.add_argument("--matrices", help="directory for Hellinger matrix / distance CSVs")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", help="write explanation artifacts")
    x.add_argument("checkpoint")
    data_opts(x)
    x.add_argument("--out", required=True)
    x.add_argument("--means", action="store_true")
    x.add_argument("--samples", action="store_true")
    x.add_argument("--truncation", help="comma-separated truncation values, e.g. 0.5,1,inf")
    x.add_argument("--n", type=int, default=0)
    x.add_argument("--interpolate", action="store_true")
    x.add_argument("--i", type=int, default=0)
    x.add_argument("--j", type=int, default=1)
    x.add_argument("--steps", type=int, default=0)
    x.add_argument("--heatmaps", action="store_true")
    x.add_argument("--rot", action="store_true")
    x.add_argument("--most-likely", action="store_true")
    x.add_argument("--n-images", type=int, default=50)
    x.set_defaults(func=cmd_explain)

    pr = sub.add_parser("prune", help="Otsu-prune prototypes")
    pr.add_argument("checkpoint")
    data_opts(pr)
    pr.add_argument("--out", required=True)
    pr.add_argument("--report")
    pr.add_argument("--bins", type=int, default=256)
    pr.set_defaults(func=cmd_prune)

    s = sub.add_parser("sample", help="sample a prototype distribution")
    s.add_argument("checkpoint")
    s.add_argument("--c", type=int, required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--t", type=float, default=float("inf"))
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    it = sub.add_parser("interpolate", help="latent interpolation between two samples")
    it.add_argument("checkpoint")
    data_opts(it)
    it.add_argument("--i", type=int, default=0)
    it.add_argument("--j", type=int, default=1)
    it.add_argument("--steps", type=int, default=8)
    it.add_argument("--out", required=True)
    it.set_defaults(func=cmd_interpolate)

    r = sub.add_parser("rot-test", help="relevance ordering test")
    r.add_argument("checkpoint")
    data_opts(r)
    r.add_argument("--n-images", type=int, default=50)
    r.add_argument("--batch-restore", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rot_test)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except CliError as err:
        print(f"error: {err.code}: {err}", file=sys.stderr)
        return EXIT_CODES[err.code]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except CliError as err:
        code = err.code
        msg = str(err)
    except cfgmod.ConfigError as err:
        code, msg = "config", str(err)
    except (ValueError, IndexError, FloatingPointError) as err:
        code, msg = "runtime", str(err)
    print(f"error: {code}: {msg}".replace("\n", " "), file=sys.stderr)
    return EXIT_CODES.get(code, 1)


if __name__ == "__main__":
    sys.exit(main())
