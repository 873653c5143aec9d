"""Command line entry point: ``cass <subcommand> [flags]``.

Every subcommand writes its outputs under ``--out`` together with a
``config_<subcommand>.json`` echo of the effective flags.  Failures print a
single JSON line ``{"error": ..., "message": ...}`` on stderr and exit 1.
"""
import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

log = logging.getLogger("cass")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def _read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _patient_range(text, manifest):
    ids = [p["patient_id"] for p in manifest["patients"]]
    if text is None:
        return ids
    lo, _, hi = text.partition(":")
    lo = int(lo) if lo else 0
    hi = int(hi) if hi else len(ids)
    if not 0 <= lo < hi <= len(ids):
        raise ValueError(f"patient range {text!r} outside 0:{len(ids)}")
    return ids[lo:hi]


# -- subcommands ------------------------------------------------------------------------

def cmd_generate(args):
    from cass.synthgen import GenConfig, generate_dataset
    cfg = GenConfig(image_size=args.image_size, views_per_branch=args.views_per_branch,
                    patients=args.patients, text_overlay=not args.no_text,
                    distractor_branch_prob=args.distractor_prob,
                    visible_view_fraction=args.visible_fraction,
                    calcified_distractor=args.calcified_distractor, seed=args.seed)
    manifest = generate_dataset(cfg, args.out)
    n = sum(len(p["branches"]) for p in manifest["patients"])
    return {"patients": len(manifest["patients"]), "branches": n}


def _train_config(args):
    from cass.train import TrainConfig
    aug = not args.no_augment
    return TrainConfig(learning_rate=args.lr, micro_batch=args.micro_batch,
                       accumulation_steps=args.accumulation_steps, epochs=args.epochs,
                       scale=aug, rotate=aug, blur=aug, brightness=aug, transpose=aug,
                       seed=args.seed)


def _training_views(args):
    from cass.data import balance_classes, load_manifest, load_views
    manifest = load_manifest(args.data)
    patients = _patient_range(args.patient_range, manifest)
    views = load_views(args.data, patients, args.views_per_branch,
                       clean=not args.no_clean_train, seed=args.seed)
    if getattr(args, "balance", False):
        views = balance_classes(views, np.random.default_rng(args.seed))
    return views


def cmd_train(args):
    from cass.model import Model, ModelConfig
    from cass.train import train
    cfg = _train_config(args)
    views = _training_views(args)
    model = Model(ModelConfig(input_shape=(1,) + views.x.shape[2:], seed=args.seed))
    log.info("training on %d views (%s)", len(views), np.bincount(views.y, minlength=3).tolist())
    tl = train(model, views, cfg, log_path=os.path.join(args.out, "train_log.jsonl"),
               weights_path=os.path.join(args.out, "weights.bin"))
    return {"views": len(views), "final": tl.records[-1] if tl.records else None,
            "train_config": cfg.to_dict()}


def cmd_lr_find(args):
    from cass.model import Model, ModelConfig
    from cass.train import lr_range_test
    views = _training_views(args)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(views))
    batches = [(views.x[order[i:i + args.micro_batch]], views.y[order[i:i + args.micro_batch]])
               for i in range(0, len(order), args.micro_batch)]
    model = Model(ModelConfig(input_shape=(1,) + views.x.shape[2:], seed=args.seed))
    res = lr_range_test(model, batches, args.lr_lo, args.lr_hi, args.iterations)
    _write_json(os.path.join(args.out, "lr_range.json"), res.to_dict())
    with open(os.path.join(args.out, "lr_range.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lr", "loss", "smoothed"])
        w.writerows(zip(res.lrs, res.losses, res.smoothed))
    return {"suggested_min": res.suggested_min, "suggested_max": res.suggested_max}


def cmd_predict(args):
    from cass.data import load_manifest, load_views
    from cass.model import load_weights
    manifest = load_manifest(args.data)
    patients = _patient_range(args.patient_range, manifest)
    views = load_views(args.data, patients, clean=True)
    model = load_weights(args.weights)
    probs = model.predict_proba(views.x, batch_size=args.batch_size).astype(np.float64)
    probs /= probs.sum(axis=1, keepdims=True)
    records = [{"patient": p, "artery": a, "branch": b, "view": int(v), "probs": pr.tolist()}
               for (p, a, b, v), pr in zip(views.keys, probs)]
    _write_json(os.path.join(args.out, "predictions.json"), records)
    return {"views": len(records)}


def cmd_evaluate(args):
    from cass.evaluate import evaluate, hierarchy_of, truths_from_json, views_from_json, write_confusion_csv
    views = views_from_json(_read_json(args.predictions))
    truths = truths_from_json(_read_json(args.labels))
    predicted_patients = {k[0] for k in views}
    hierarchy = hierarchy_of([k for k in truths if k[0] in predicted_patients])
    reports = evaluate(truths, views, hierarchy)
    _write_json(os.path.join(args.out, "metrics.json"), {lv: r.to_json() for lv, r in reports.items()})
    for lv, r in reports.items():
        write_confusion_csv(r, os.path.join(args.out, f"confusion_{lv}.csv"))
    return {lv: {"accuracy": r.accuracy, "weighted_f1": r.weighted_f1} for lv, r in reports.items()}


def cmd_attribute(args):
    from cass.attribution import integrated_gradients, render_heatmap, write_raw_map
    from cass.imageio import read_pgm
    from cass.model import load_weights
    from cass.preprocess import preprocess
    from cass.reports import StenosisClass
    model = load_weights(args.weights, dtype=np.float64)
    clean = preprocess(read_pgm(args.image))
    target = StenosisClass[args.target_class] if not args.target_class.isdigit() \
        else StenosisClass(int(args.target_class))
    amap = integrated_gradients(model, clean, int(target), steps=args.steps)
    render_heatmap(amap, clean, os.path.join(args.out, "heatmap.png"))
    write_raw_map(os.path.join(args.out, "attribution.bin"), amap.values)
    summary = {"target_class": target.name, "steps": amap.steps, "baseline": amap.baseline,
               "completeness_gap": amap.completeness_gap, "logit_delta": amap.logit_delta}
    _write_json(os.path.join(args.out, "attribution.json"), summary)
    return summary


def cmd_parse_report(args):
    from cass.reports import parse_report
    with open(args.report, encoding="utf-8") as f:
        text = f.read()
    labels = parse_report(text, strategy=args.strategy,
                          fifty_is_significant=args.fifty_is_significant)
    _write_json(os.path.join(args.out, "labels.json"), labels.to_json())
    return labels.to_json()


# -- parser -----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="cass", description="Stenosis classification pipeline on MPR views.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="BLAS/worker thread cap")
    p.add_argument("--out", required=True, help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--patients", type=int, default=10)
    g.add_argument("--views-per-branch", type=int, default=50)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--visible-fraction", type=float, default=0.6)
    g.add_argument("--distractor-prob", type=float, default=0.1)
    g.add_argument("--calcified-distractor", action="store_true")
    g.add_argument("--no-text", action="store_true")

    def data_flags(sp, subsample=True):
        sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--patient-range", help="START:END indices into the manifest")
        if subsample:
            sp.add_argument("--views-per-branch", type=int, help="evenly spaced views kept per branch")
            sp.add_argument("--no-clean-train", action="store_true", help="skip text removal")
            sp.add_argument("--micro-batch", type=int, default=32)

    t = sub.add_parser("train", help="train the classifier")
    data_flags(t)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--accumulation-steps", type=int, default=1)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--balance", action="store_true", help="oversample minority classes")

    lr = sub.add_parser("lr-find", help="learning-rate range test")
    data_flags(lr)
    lr.add_argument("--lr-lo", type=float, default=1e-5)
    lr.add_argument("--lr-hi", type=float, default=1e-1)
    lr.add_argument("--iterations", type=int, default=100)

    pr = sub.add_parser("predict", help="per-view class probabilities")
    data_flags(pr, subsample=False)
    pr.add_argument("--weights", required=True)
    pr.add_argument("--batch-size", type=int, default=256)

    ev = sub.add_parser("evaluate", help="segment/artery/patient metrics")
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--labels", required=True, help="manifest.json or flat label list")

    at = sub.add_parser("attribute", help="Integrated Gradients heatmap for one image")
    at.add_argument("--weights", required=True)
    at.add_argument("--image", required=True, help="PGM view")
    at.add_argument("--target-class", default="SIGNIFICANT", help="class name or index")
    at.add_argument("--steps", type=int, default=50)

    rp = sub.add_parser("parse-report", help="extract branch labels from a report")
    rp.add_argument("report")
    rp.add_argument("--strategy", choices=["upper", "midpoint"], default="upper")
    rp.add_argument("--fifty-is-significant", action="store_true")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "lr-find": cmd_lr_find,
            "predict": cmd_predict, "evaluate": cmd_evaluate, "attribute": cmd_attribute,
            "parse-report": cmd_parse_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = os.environ.get("CASS_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        os.makedirs(args.out, exist_ok=True)
        echo = {k: v for k, v in vars(args).items()}
        _write_json(os.path.join(args.out, f"config_{args.command.replace('-', '_')}.json"), echo)
        with threadpool_limits(limits=args.threads):
            summary = COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001  one machine-readable line for any failure
        log.debug("failure", exc_info=True)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
