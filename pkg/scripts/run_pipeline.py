"""Generate -> train -> predict -> evaluate on a fresh synthetic dataset.

    python3 scripts/run_pipeline.py --out runs/desk

Prints one JSON line with per-level metrics and stage timings.
"""
import argparse
import json
import os
import sys
import time

from cass.cli import main as cass

DEFAULTS = dict(train_patients=100, test_patients=25, views_per_branch=50, train_views=15,
                epochs=8, lr=1e-3, micro_batch=32)


def run(out, seed=0, threads=1, **kw):
    p = {**DEFAULTS, **kw}
    n = p["train_patients"] + p["test_patients"]
    data, work = os.path.join(out, "data"), os.path.join(out, "run")
    common = ["--seed", str(seed), "--threads", str(threads)]
    stages = [
        ("generate", ["--out", data, "generate", "--patients", str(n),
                      "--views-per-branch", str(p["views_per_branch"])]),
        ("train", ["--out", work, "train", "--data", data, "--patient-range", f"0:{p['train_patients']}",
                   "--views-per-branch", str(p["train_views"]), "--epochs", str(p["epochs"]),
                   "--lr", str(p["lr"]), "--micro-batch", str(p["micro_batch"])]),
        ("predict", ["--out", work, "predict", "--data", data, "--patient-range", f"{p['train_patients']}:{n}",
                     "--weights", os.path.join(work, "weights.bin")]),
        ("evaluate", ["--out", work, "evaluate", "--predictions", os.path.join(work, "predictions.json"),
                      "--labels", os.path.join(data, "manifest.json")]),
    ]
    timings = {}
    for name, argv in stages:
        t = time.perf_counter()
        if cass(common + argv) != 0:
            raise RuntimeError(f"stage {name} failed")
        timings[name] = time.perf_counter() - t
    with open(os.path.join(work, "metrics.json")) as f:
        metrics = json.load(f)
    return {"metrics": metrics, "timings": timings, "total_seconds": sum(timings.values()),
            "weights": os.path.join(work, "weights.bin"), "data": data, "params": p}


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    for k, v in DEFAULTS.items():
        ap.add_argument("--" + k.replace("_", "-"), type=type(v), default=v)
    a = vars(ap.parse_args())
    res = run(a.pop("out"), a.pop("seed"), a.pop("threads"), **a)
    summary = {lv: {"accuracy": m["accuracy"], "weighted_f1": m["weighted_f1"]}
               for lv, m in res["metrics"].items()}
    print(json.dumps({"levels": summary, "timings": res["timings"],
                      "total_seconds": res["total_seconds"]}, sort_keys=True))
    sys.exit(0)
