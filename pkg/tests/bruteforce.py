"""Independent, deliberately naive evaluator used as an oracle.

It shares no code with ``cass.evaluate``: votes are tallied with explicit
loops, and every metric is counted pair by pair.
"""
import numpy as np


def brute_majority(classes):
    best, best_count = None, -1
    for c in (2, 1, 0):  # severe first so that ties keep the severe class
        n = sum(1 for x in classes if x == c)
        if n > best_count:
            best, best_count = c, n
    return best


def brute_metrics(pairs):
    n = len(pairs)
    correct = sum(1 for t, p in pairs if t == p)
    f1s, weights, rows = [], [], []
    for c in range(3):
        tp = sum(1 for t, p in pairs if t == c and p == c)
        fp = sum(1 for t, p in pairs if t != c and p == c)
        fn = sum(1 for t, p in pairs if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        support = sum(1 for t, _ in pairs if t == c)
        weights.append(support / n)
        rows.append([sum(1 for t, p in pairs if t == c and p == k) / support if support else 0.0
                     for k in range(3)])
    return {"accuracy": correct / n, "per_class_f1": f1s,
            "weighted_f1": sum(f * w for f, w in zip(f1s, weights)), "confusion": rows}


def brute_evaluate(records):
    """``records``: list of ``(patient, artery, branch, truth, [view classes])``."""
    seg, art, pat = [], [], []
    patients = sorted({r[0] for r in records})
    for p in patients:
        pt_truth, pt_pred = 0, 0
        for a in sorted({r[1] for r in records if r[0] == p}):
            at, ap = 0, 0
            for r in records:
                if r[0] == p and r[1] == a:
                    v = brute_majority(r[4])
                    seg.append((r[3], v))
                    at, ap = max(at, r[3]), max(ap, v)
            art.append((at, ap))
            pt_truth, pt_pred = max(pt_truth, at), max(pt_pred, ap)
        pat.append((pt_truth, pt_pred))
    return {"segment": brute_metrics(seg), "artery": brute_metrics(art),
            "patient": brute_metrics(pat)}


def random_hierarchy(rng, max_patients=10):
    records = []
    for p in range(int(rng.integers(1, max_patients + 1))):
        for a in rng.choice(["LAD", "LCX", "RCA"], size=int(rng.integers(1, 4)), replace=False):
            for b in range(int(rng.integers(1, 4))):
                truth = int(rng.integers(0, 3))
                views = rng.integers(0, 3, size=int(rng.integers(1, 12))).tolist()
                records.append((f"p{p}", str(a), f"{a}-{b}", truth, views))
    return records


def compare(reports, oracle, tol=1e-9):
    for level, ref in oracle.items():
        rep = reports[level]
        assert abs(rep.accuracy - ref["accuracy"]) <= tol, level
        assert abs(rep.weighted_f1 - ref["weighted_f1"]) <= tol, level
        assert np.allclose(rep.per_class_f1, ref["per_class_f1"], rtol=0, atol=tol), level
        assert np.allclose(rep.confusion, ref["confusion"], rtol=0, atol=tol), level
