"""Loading a generated dataset tree into view arrays."""
import json
import os
from dataclasses import dataclass

import numpy as np

from cass.imageio import read_pgm
from cass.preprocess import RawMprImage, preprocess


@dataclass
class ViewSet:
    x: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    y: np.ndarray  # (N,) int64 branch labels
    keys: list  # (patient, artery, section, view) per row

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return ViewSet(self.x[idx], self.y[idx], [self.keys[i] for i in idx])


def load_manifest(root):
    path = os.path.join(root, "manifest.json")
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise OSError(f"{path}: {e.strerror}") from None


def split_patients(manifest, n_train):
    """First ``n_train`` patients for training, the rest for testing."""
    ids = [p["patient_id"] for p in manifest["patients"]]
    if not 0 <= n_train <= len(ids):
        raise ValueError(f"cannot take {n_train} training patients out of {len(ids)}")
    return ids[:n_train], ids[n_train:]


def load_views(root, patients=None, views_per_branch=None, clean=True, seed=0):
    """Read and preprocess every view of the selected patients.

    ``views_per_branch`` keeps an evenly spaced subset of views per branch
    (offset drawn from ``seed``); ``None`` keeps all of them.
    """
    manifest = load_manifest(root)
    wanted = None if patients is None else set(patients)
    rng = np.random.default_rng(seed)
    xs, ys, keys = [], [], []
    for patient in manifest["patients"]:
        pid = patient["patient_id"]
        if wanted is not None and pid not in wanted:
            continue
        for b in patient["branches"]:
            n = b["views"]
            chosen = range(n)
            if views_per_branch is not None and views_per_branch < n:
                step = n / views_per_branch
                off = rng.uniform(0, step)
                chosen = sorted({int(off + i * step) % n for i in range(views_per_branch)})
            for v in chosen:
                path = os.path.join(root, b["dir"], f"view_{v:02d}.pgm")
                raw = RawMprImage(read_pgm(path), v, b["section"], pid)
                xs.append(preprocess(raw, clean=clean).pixels.astype(np.float32))
                ys.append(b["class"])
                keys.append((pid, b["artery"], b["section"], v))
    if not xs:
        raise ValueError(f"{root}: no views selected")
    return ViewSet(np.stack(xs)[:, None], np.asarray(ys, dtype=np.int64), keys)


def balance_classes(views, rng):
    """Duplicate minority-class rows until every present class matches the largest."""
    counts = np.bincount(views.y, minlength=3)
    target = counts.max()
    idx = [np.arange(len(views))]
    for c, n in enumerate(counts):
        if 0 < n < target:
            idx.append(rng.choice(np.flatnonzero(views.y == c), size=target - n, replace=True))
    return views.subset(np.concatenate(idx))
