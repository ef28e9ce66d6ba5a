"""Command-line workflow over a single run directory.

    pfoa synth      --out RUN [--config FILE] [--seed N]
    pfoa preprocess --out RUN
    pfoa train      --out RUN --model gbm1|gbm2|gbm3|cnn|cnn-attn [--folds K] [--seed N]
    pfoa stack      --out RUN [--clinical gbm3] [--cnn cnn-attn]
    pfoa eval       --out RUN [PREDICTIONS.csv ...]
    pfoa compare    A.csv B.csv [--out RUN]
    pfoa explain    --out RUN [--model gbm3]
    pfoa attn       --out RUN --checkpoint FILE --knees ID[,ID...]

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np
from PIL import Image

from . import attention as attn
from . import cv, io, metrics, roi, synth
from .data import CLINICAL_FEATURES
from .errors import ConfigError, LoadError, PfoaError, SchemaError, ValidationError
from .gbm import FeatureMatrix, GbmConfig, GbmModel, ShapExplainer

log = logging.getLogger("pfoa")

SECTIONS = ("synth", "gbm", "stack", "train", "backbone", "preprocess")
SECTION_TYPES = {
    "synth": synth.SynthConfig,
    "gbm": GbmConfig,
    "stack": GbmConfig,
    "train": attn.TrainConfig,
    "backbone": attn.BackboneConfig,
    "preprocess": roi.PreprocessConfig,
}


class UsageError(PfoaError):
    """Bad invocation or missing upstream artifact (exit code 2)."""


# ---------------------------------------------------------------------------
# configuration


def load_settings(path):
    """Split a key-value config file into per-section dicts.

    Undotted keys and ``effect_strengths.*`` belong to the synth section;
    ``gbm.*``, ``stack.*``, ``train.*``, ``backbone.*`` and ``preprocess.*``
    to the matching configs.  Unknown keys are rejected.
    """
    raw = io.read_config(path) if path else {}
    out = {s: {} for s in SECTIONS}
    for key, value in raw.items():
        if isinstance(value, dict) and key in SECTIONS:
            out[key].update(value)
        elif isinstance(value, dict) and key == "effect_strengths":
            out["synth"]["effect_strengths"] = {**synth.DEFAULT_EFFECTS, **value}
        elif isinstance(value, dict):
            raise ConfigError(f"unknown config section {key!r}", key)
        else:
            out["synth"][key] = value
    for section, values in out.items():
        known = {f.name for f in fields(SECTION_TYPES[section])}
        for key in values:
            if key not in known:
                name = key if section == "synth" else f"{section}.{key}"
                raise ConfigError(f"unknown config key {name!r}", name)
    return out


def build_config(section, settings, **overrides):
    values = dict(settings.get(section, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    if section == "stack":
        values.setdefault("max_leaves", 4)
    if section == "preprocess" and not values:
        return roi.PreprocessConfig.desk()
    try:
        cfg = SECTION_TYPES[section](**values)
    except TypeError as exc:
        raise ConfigError(f"invalid {section} configuration: {exc}", section) from exc
    if section == "synth":
        cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# run directory helpers


def _path(run, *parts):
    return os.path.join(run, *parts)


def _require(path):
    if not os.path.exists(path):
        raise UsageError(f"missing upstream artifact: expected {path}")
    return path


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def write_manifest(run, name, args, configs=None, inputs=(), outputs=()):
    """Record what a command read and wrote; content hashes make reruns comparable."""
    manifest = {
        "command": name,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "configs": {k: asdict(v) for k, v in (configs or {}).items()},
        "inputs": {p: io.sha256_file(p) for p in inputs if os.path.isfile(p)},
        "outputs": {p: io.sha256_file(p) for p in outputs if os.path.isfile(p)},
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    }
    _write_json(_path(run, "manifests", f"{name}.json"), manifest)
    return manifest


def _clinical(run):
    return synth.read_clinical_csv(_require(_path(run, "cohort", "clinical.csv")))


def _cv_data(rows, images=None):
    return cv.CvData(
        knee_ids=[r["knee_id"] for r in rows],
        subject_ids=[r["subject_id"] for r in rows],
        labels=np.array([r["label"] for r in rows]),
        clinical=FeatureMatrix([[float(r[f]) for f in CLINICAL_FEATURES] for r in rows], CLINICAL_FEATURES),
        images=images,
    )


def _folds(run, rows, k, seed):
    """Load the run's fold assignment, creating it on first use so every model shares it."""
    path = _path(run, "folds.json")
    if os.path.exists(path):
        with open(path) as fh:
            folds = cv.FoldAssignment.from_dict(json.load(fh))
        if k is not None and folds.k != k:
            raise UsageError(f"{path} holds k={folds.k} folds but --folds {k} was requested")
        return folds
    folds = cv.make_folds([r["subject_id"] for r in rows], [r["label"] for r in rows], k or 5, seed or 0)
    _write_json(path, {**folds.to_dict(), "digest": folds.digest()})
    return folds


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    settings = load_settings(args.config)
    cfg = build_config("synth", settings, seed=args.seed)
    records = synth.generate_cohort(cfg)
    out = _path(args.out, "cohort")
    synth.write_cohort(records, cfg, out)
    labels = np.array([r.label for r in records])
    summary = {"n_knees": len(records), "n_subjects": cfg.n_subjects, "prevalence": float(labels.mean())}
    _write_json(_path(out, "summary.json"), summary)
    write_manifest(args.out, "synth", args, {"synth": cfg}, outputs=[_path(out, "clinical.csv")])
    print(f"synth: {summary['n_knees']} knees, prevalence {summary['prevalence']:.4f} -> {out}")
    return 0


def _load_points(path, key):
    with open(path) as fh:
        return json.load(fh)[key]


def cmd_preprocess(args):
    settings = load_settings(args.config)
    pcfg = build_config("preprocess", settings)
    cohort = args.cohort or _path(args.out, "cohort")
    rows = synth.read_clinical_csv(_require(_path(cohort, "clinical.csv")))
    out = _path(args.out, "roi")
    os.makedirs(_path(out, "previews"), exist_ok=True)
    failures = []
    for r in rows:
        kid = r["knee_id"]
        try:
            image = io.read_png(_path(cohort, "images", f"{kid}.png")) / synth.IMAGE_SCALE
            points = np.asarray(_load_points(_path(cohort, "landmarks", f"{kid}.json"), "points"), float)
            lesion_path = _path(cohort, "lesions", f"{kid}.json")
            boxes = _load_points(lesion_path, "boxes") if os.path.exists(lesion_path) else []
            result = roi.preprocess_knee(image, points, r["side"], pcfg, boxes)
            pixels, mapped = roi.model_input(result, pcfg)
        except (OSError, ValueError, KeyError, TypeError, PfoaError) as exc:
            failures.append({"knee_id": kid, "error": f"{type(exc).__name__}: {exc}"})
            log.warning("preprocess: %s skipped (%s)", kid, exc)
            continue
        io.write_array(
            _path(out, f"{kid}.f32"),
            pixels,
            knee_id=kid,
            box=list(result.box.as_list()),
            rotation_applied=float(result.rotation_applied),
            lesion_boxes=[{"kind": b["kind"], "corners": np.round(b["corners"], 6).tolist()} for b in mapped],
        )
        lo, hi = float(pixels.min()), float(pixels.max())
        io.write_png8(_path(out, "previews", f"{kid}.png"), (pixels - lo) / (hi - lo) if hi > lo else pixels * 0)
    summary = {"processed": len(rows) - len(failures), "failed": len(failures), "failures": failures}
    _write_json(_path(out, "summary.json"), summary)
    write_manifest(args.out, "preprocess", args, {"preprocess": pcfg}, inputs=[_path(cohort, "clinical.csv")])
    print(f"preprocess: processed {summary['processed']}, failed {summary['failed']}")
    if rows and summary["processed"] == 0:
        return 1
    return 0


def _load_rois(run, rows):
    """ROI tensors for the knees that preprocessed successfully (others are dropped)."""
    out = _require(_path(run, "roi"))
    kept, images = [], []
    for r in rows:
        path = _path(out, f"{r['knee_id']}.f32")
        if os.path.exists(path):
            arr, _ = io.read_array(path)
            kept.append(r)
            images.append(arr)
    if not kept:
        raise UsageError(f"no ROI tensors found under {out}; run preprocess first")
    return kept, np.stack(images)[:, None].astype(np.float32)


def cmd_train(args):
    if args.model not in cv.MODEL_NAMES:
        raise UsageError(f"unknown model {args.model!r}; valid names: {', '.join(cv.MODEL_NAMES)}")
    settings = load_settings(args.config)
    rows = _clinical(args.out)
    images = None
    if args.model in ("cnn", "cnn-attn"):
        rows, images = _load_rois(args.out, rows)
    folds = _folds(args.out, _clinical(args.out), args.folds, args.seed)
    data = _cv_data(rows, images)
    gcfg = build_config("gbm", settings)
    bcfg = build_config("backbone", settings)
    tcfg = build_config("train", settings)
    spec = cv.model_spec(args.model, gbm=gcfg, backbone=bcfg, train=tcfg)
    result = cv.run_cv(spec, data, folds, keep_models=True)
    if not cv.audit_no_leakage(result, data.subject_ids):
        raise RuntimeError("leakage audit failed")

    model_dir = _path(args.out, "models", args.model)
    os.makedirs(model_dir, exist_ok=True)
    for f, model in enumerate(result.models):
        if spec.kind == "gbm":
            with open(_path(model_dir, f"fold{f}.json"), "w") as fh:
                fh.write(model.to_json())
        else:
            attn.save_model(model, _path(model_dir, f"fold{f}.ckpt"))
            attn.write_history(model.history, _path(model_dir, f"fold{f}_history.csv"))
    if spec.kind == "cnn":
        shapes = attn.param_shapes(bcfg, spec.with_attention)
        _write_json(_path(model_dir, "parameters.json"), {n: list(s) for n, (s, _) in shapes.items()})
    _write_json(_path(model_dir, "fold_metrics.json"), result.fold_metrics)

    table = cv.PredictionTable(data.knee_ids, result.folds, data.labels)
    table.add(args.model, result.probabilities)
    pred_path = _path(args.out, "predictions", f"{args.model}.csv")
    os.makedirs(os.path.dirname(pred_path), exist_ok=True)
    table.write_csv(pred_path)
    configs = {"gbm": gcfg} if spec.kind == "gbm" else {"backbone": bcfg, "train": tcfg}
    write_manifest(
        args.out, f"train_{args.model}", args, configs, inputs=[_path(args.out, "cohort", "clinical.csv")], outputs=[pred_path]
    )
    manifest_extra = {"fold_digest": folds.digest(), "k": folds.k, "fold_seed": folds.seed}
    _write_json(_path(model_dir, "cv.json"), manifest_extra)
    print(f"train {args.model}: pooled AUC {metrics.auc(result.probabilities, data.labels):.4f} -> {pred_path}")
    return 0


def _read_table(path):
    _require(path)
    return cv.PredictionTable.read_csv(path)


def _write_curve(path, header, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) for v in row])


def cmd_eval(args):
    paths = args.predictions or sorted(
        _path(args.out, "predictions", p)
        for p in os.listdir(_require(_path(args.out, "predictions")))
        if p.endswith(".csv")
    )
    out = _path(args.out, "eval")
    os.makedirs(_path(out, "curves"), exist_ok=True)
    report = {}
    for path in paths:
        table = _read_table(path)
        for model, p in table.columns.items():
            entry = metrics.report(p, table.labels, table.folds)
            entry["source"] = os.path.basename(path)
            report[model] = entry
            fpr, tpr, thr = metrics.roc_points(p, table.labels)
            _write_curve(_path(out, "curves", f"{model}_roc.csv"), ["threshold", "fpr", "tpr"], [thr, fpr, tpr])
            rec, prec, thr = metrics.pr_points(p, table.labels)
            _write_curve(_path(out, "curves", f"{model}_pr.csv"), ["threshold", "recall", "precision"], [thr, rec, prec])
    if args.format == "csv":
        keys = ["model", "auc", "auc_ci_low", "auc_ci_high", "ap", "ap_ci_low", "ap_ci_high", "brier", "n_pos", "n_neg"]
        with open(_path(out, "report.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for model, e in report.items():
                ap_ci = e.get("ap_ci", [float("nan")] * 2)
                w.writerow([model, e["auc"], *e["auc_ci"], e["ap"], *ap_ci, e["brier"], e["n_pos"], e["n_neg"]])
    _write_json(_path(out, "report.json"), report)
    write_manifest(args.out, "eval", args, inputs=paths, outputs=[_path(out, "report.json")])
    for model, e in report.items():
        lo, hi = e["auc_ci"]
        print(f"{model}: AUC {e['auc']:.3f} [{lo:.3f}, {hi:.3f}]  AP {e['ap']:.3f}  Brier {e['brier']:.3f}")
    return 0


def _single_column(table, path, name=None):
    if name is not None:
        if name not in table.columns:
            raise UsageError(f"{path} has no model {name!r}")
        return name, table.columns[name]
    if len(table.columns) != 1:
        raise UsageError(f"{path} holds several models; choose one with --model-a/--model-b")
    return next(iter(table.columns.items()))


def cmd_compare(args):
    ta, tb = _read_table(args.a), _read_table(args.b)
    name_a, pa = _single_column(ta, args.a, args.model_a)
    name_b, pb = _single_column(tb, args.b, args.model_b)
    if ta.knee_ids != tb.knee_ids:
        n = min(len(ta.knee_ids), len(tb.knee_ids))
        first = next((ta.knee_ids[i] for i in range(n) if ta.knee_ids[i] != tb.knee_ids[i]), None)
        if first is None:
            first = (ta.knee_ids + tb.knee_ids)[n]
        raise UsageError(f"knee ids differ between files; first mismatch at {first!r}")
    if not np.array_equal(ta.labels, tb.labels):
        raise UsageError("labels differ between files")
    res = metrics.delong_test(pa, pb, ta.labels)
    report = {"model_a": name_a, "model_b": name_b, **res.as_dict()}
    if args.out:
        _write_json(_path(args.out, "eval", f"compare_{name_a}_vs_{name_b}.json"), report)
    print(json.dumps(report, sort_keys=True, default=_json_default))
    return 0


def cmd_stack(args):
    settings = load_settings(args.config)
    scfg = build_config("stack", settings)
    pc = args.clinical if args.clinical.endswith(".csv") else _path(args.out, "predictions", f"{args.clinical}.csv")
    pn = args.cnn if args.cnn.endswith(".csv") else _path(args.out, "predictions", f"{args.cnn}.csv")
    tc, tn = _read_table(pc), _read_table(pn)
    _, a = _single_column(tc, pc)
    _, b = _single_column(tn, pn)
    # restrict to knees present in both (CNN tables omit knees that failed preprocessing)
    index = {k: i for i, k in enumerate(tc.knee_ids)}
    common = [k for k in tn.knee_ids if k in index]
    ia = np.array([index[k] for k in common])
    ib = np.arange(len(tn.knee_ids))[[k in index for k in tn.knee_ids]]
    if not np.array_equal(tc.folds[ia], tn.folds[ib]):
        raise UsageError("prediction files were produced with different fold assignments")
    fusion = "mean" if args.mean_fusion else "gbm"
    stacked = cv.stack_second_layer(a[ia], b[ib], tc.labels[ia], tc.folds[ia], scfg, fusion=fusion)
    table = cv.PredictionTable(common, tc.folds[ia], tc.labels[ia])
    name = args.name or ("stacked-mean" if args.mean_fusion else "stacked")
    table.add(name, stacked)
    out = _path(args.out, "predictions", f"{name}.csv")
    os.makedirs(os.path.dirname(out), exist_ok=True)
    table.write_csv(out)
    write_manifest(args.out, f"stack_{name}", args, {"stack": scfg}, inputs=[pc, pn], outputs=[out])
    print(f"stack: pooled AUC {metrics.auc(stacked, table.labels):.4f} -> {out}")
    return 0


def cmd_explain(args):
    if args.model not in cv.GBM_FEATURES:
        raise UsageError(f"explain needs a GBM model ({', '.join(cv.GBM_FEATURES)}), got {args.model!r}")
    rows = _clinical(args.out)
    folds_path = _require(_path(args.out, "folds.json"))
    with open(folds_path) as fh:
        folds = cv.FoldAssignment.from_dict(json.load(fh))
    kf = folds.knee_folds([r["subject_id"] for r in rows])
    features = cv.GBM_FEATURES[args.model]
    X = np.array([[float(r[f]) for f in features] for r in rows])
    rng = np.random.default_rng(args.seed or 0)
    out_rows, phis = [], []
    for f in range(folds.k):
        path = _require(_path(args.out, "models", args.model, f"fold{f}.json"))
        with open(path) as fh:
            model = GbmModel.from_json(fh.read())
        train = np.nonzero(kf != f)[0]
        bg = train[np.sort(rng.choice(len(train), size=min(args.background, len(train)), replace=False))]
        explainer = ShapExplainer(model, FeatureMatrix(X[bg], features))
        test = np.nonzero(kf == f)[0]
        phi = explainer.shap_values(FeatureMatrix(X[test], features))
        margin = model.predict_margin(FeatureMatrix(X[test], features))
        for i, k in enumerate(test):
            out_rows.append((rows[k]["knee_id"], f, explainer.base_value, *phi[i], margin[i]))
        phis.append(phi)
    phi_all = np.concatenate(phis)
    importance = np.abs(phi_all).mean(axis=0)
    order = np.argsort(-importance, kind="mergesort")
    out_dir = _path(args.out, "explain")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = _path(out_dir, f"{args.model}_shap.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["knee_id", "fold", "base_value", *[f"phi_{f}" for f in features], "margin"])
        for r in sorted(out_rows, key=lambda t: t[0]):
            w.writerow([r[0], r[1], *[repr(float(v)) for v in r[2:]]])
    ranking = [{"feature": features[i], "mean_abs_shap": float(importance[i])} for i in order]
    _write_json(_path(out_dir, f"{args.model}_importance.json"), ranking)
    write_manifest(args.out, f"explain_{args.model}", args, outputs=[csv_path])
    print("importance: " + ", ".join(f"{r['feature']}={r['mean_abs_shap']:.4f}" for r in ranking))
    return 0


def cmd_attn(args):
    model = attn.load_model(_require(args.checkpoint))
    if not model.with_attention:
        raise UsageError(f"{args.checkpoint} was trained without attention")
    out_dir = _path(args.out, "attention")
    os.makedirs(out_dir, exist_ok=True)
    knees = [k for k in args.knees.split(",") if k]
    if not knees:
        raise UsageError("--knees must list at least one knee id")
    for kid in knees:
        arr, _ = io.read_array(_require(_path(args.out, "roi", f"{kid}.f32")))
        off = (arr.shape[0] - model.backbone.input_size) // 2
        scaled, raw = attn.attention_overlay(model, arr[None, None], tap=args.tap)
        crop = arr[off : off + model.backbone.input_size, off : off + model.backbone.input_size]
        lo, hi = float(crop.min()), float(crop.max())
        base = (crop - lo) / (hi - lo) if hi > lo else np.zeros_like(crop)
        rgb = np.stack([0.6 * base + 0.4 * scaled, 0.6 * base, 0.6 * base * (1 - scaled)], axis=-1)
        Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(
            _path(out_dir, f"{kid}.png")
        )
        io.write_array(_path(out_dir, f"{kid}.f32"), raw, knee_id=kid, tap=args.tap)
    print(f"attn: wrote {len(knees)} overlay(s) to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=".", help="run directory")
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="overrides the relevant seed")
    common.add_argument("--threads", type=int, help="limit BLAS threads")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="report format; json also emits errors as JSON on stderr")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pfoa", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="extract ROI tensors")
    s.add_argument("--cohort", help="cohort directory (default RUN/cohort)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="cross-validated training of one model")
    s.add_argument("--model", required=True, help="|".join(cv.MODEL_NAMES))
    s.add_argument("--folds", type=int, help="number of folds (default 5)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="metrics and curves for prediction files")
    s.add_argument("predictions", nargs="*", help="prediction CSVs (default: all in RUN/predictions)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", parents=[common], help="DeLong test between two prediction files")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--model-a")
    s.add_argument("--model-b")
    s.set_defaults(func=cmd_compare, out=None)

    s = sub.add_parser("stack", parents=[common], help="second-layer GBM on two prediction columns")
    s.add_argument("--clinical", default="gbm3", help="model name or CSV path")
    s.add_argument("--cnn", default="cnn-attn", help="model name or CSV path")
    s.add_argument("--name", help="output model name")
    s.add_argument("--mean-fusion", action="store_true", help="average the inputs instead (baseline)")
    s.set_defaults(func=cmd_stack)

    s = sub.add_parser("explain", parents=[common], help="exact Shapley values for a GBM model")
    s.add_argument("--model", default="gbm3")
    s.add_argument("--background", type=int, default=100, help="background rows per fold")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("attn", parents=[common], help="attention overlays for selected knees")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--knees", required=True, help="comma-separated knee ids")
    s.add_argument("--tap", type=int, help="attention tap index (default: deepest)")
    s.set_defaults(func=cmd_attn)
    return p


def _report_error(args, code, exc):
    field = getattr(exc, "field", None)
    if getattr(args, "format", "json") == "json":
        payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if field:
            payload["field"] = field
        print(json.dumps(payload), file=sys.stderr)
    else:
        print(f"error: {exc}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, ConfigError, ValidationError, SchemaError, LoadError) as exc:
        return _report_error(args, 2, exc)
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        return _report_error(args, 1, exc)


if __name__ == "__main__":
    sys.exit(main())
