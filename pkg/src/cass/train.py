"""Training: Adam, gradient accumulation, LR range test, and augmentation."""
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from cass import tensor as T
from cass.model import save_weights

log = logging.getLogger(__name__)


class OptimizerError(ArithmeticError):
    """A gradient or update is not finite."""


class RangeError(ValueError):
    """The LR range test could not produce a usable curve."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    micro_batch: int = 32
    accumulation_steps: int = 1
    epochs: int = 10
    scale: bool = True
    rotate: bool = True
    blur: bool = True
    brightness: bool = True
    transpose: bool = True
    recalibrate_bn: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.micro_batch < 1 or self.accumulation_steps < 1:
            raise ValueError("micro_batch and accumulation_steps must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def effective_batch(self):
        return self.micro_batch * self.accumulation_steps

    @property
    def augmentations(self):
        return {k: getattr(self, k) for k in AUGMENTATIONS}

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# -- optimizers -------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, names=None):
    """One bias-corrected Adam update of ``params`` in place."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise OptimizerError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState([np.zeros_like(p.value) for p in self.params],
                               [np.zeros_like(p.value) for p in self.params])

    def step(self):
        adam_step([p.value for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.betas, self.eps, names=[p.name for p in self.params])
        for p in self.params:
            p.zero_grad()


class SGD:
    def __init__(self, params, lr=1e-2):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise OptimizerError(f"non-finite gradient for parameter {p.name}")
            p.value -= (self.lr * p.grad).astype(p.value.dtype, copy=False)
            p.zero_grad()


OPTIMIZERS = {"adam": Adam, "sgd": SGD}


# -- steps ------------------------------------------------------------------------------

def classification_loss(model, batch, train=True):
    """Forward + backward of mean cross-entropy; grads accumulate into the model."""
    x, y = batch
    logits = model.forward(x, train=train)
    loss, probs, dlogits = T.softmax_cross_entropy(logits, y)
    model.backward(dlogits.astype(model.dtype, copy=False))
    classification_loss.last_correct = int((logits.argmax(1) == y).sum())
    return loss


def accumulate_and_step(model, batches, optimizer, loss_fn=classification_loss, train=True):
    """Sum grads over micro-batches, scale by 1/k, take one optimizer step; returns mean loss."""
    if not batches:
        raise ValueError("accumulate_and_step needs at least one micro-batch")
    k = len(batches)
    total = 0.0
    for batch in batches:
        total += loss_fn(model, batch, train=train)
    if k > 1:
        for p in model.parameters():
            p.grad *= p.grad.dtype.type(1.0 / k)
    optimizer.step()
    return total / k


# -- LR range test ---------------------------------------------------------------------

@dataclass
class LrRangeResult:
    lrs: list
    losses: list
    smoothed: list
    suggested_min: float
    suggested_max: float
    diverged_at: int = None

    def to_dict(self):
        return asdict(self)


def lr_range_test(model, data, lr_lo, lr_hi, iterations, optimizer="adam",
                  loss_fn=classification_loss, beta=0.98, diverge_factor=4.0):
    """Train with linearly increasing lr; the model is restored afterwards.

    ``data`` is a sequence of batches, cycled as needed.  The smoothed loss is
    a bias-corrected EMA; the run stops once it exceeds ``diverge_factor``
    times the best value seen.
    """
    if not 0 < lr_lo < lr_hi:
        raise ValueError(f"need 0 < lr_lo < lr_hi, got {lr_lo}, {lr_hi}")
    if iterations < 2:
        raise ValueError("iterations must be >= 2")
    data = list(data)
    if not data:
        raise ValueError("lr_range_test needs at least one batch")
    snapshot = model.state_dict()
    schedule = np.linspace(lr_lo, lr_hi, iterations)
    opt = OPTIMIZERS[optimizer](model.parameters(), lr=lr_lo)
    lrs, losses, smoothed = [], [], []
    avg, best, diverged = 0.0, math.inf, None
    try:
        for i, lr in enumerate(schedule):
            opt.lr = float(lr)
            model.zero_grad()
            try:
                loss = accumulate_and_step(model, [data[i % len(data)]], opt, loss_fn)
            except OptimizerError:
                loss = math.inf
            if not math.isfinite(loss):
                if i == 0:
                    raise RangeError(f"loss diverged on the first iteration (lr={lr:g})")
                diverged = i
                break
            avg = beta * avg + (1 - beta) * loss
            s = avg / (1 - beta ** (i + 1))
            lrs.append(float(lr))
            losses.append(float(loss))
            smoothed.append(float(s))
            best = min(best, s)
            if s > diverge_factor * best:
                diverged = i
                break
    finally:
        model.load_state_dict(snapshot)
        model.zero_grad()
    top = lrs[int(np.argmin(smoothed))]
    return LrRangeResult(lrs, losses, smoothed, top / 10, top, diverged)


# -- augmentation -----------------------------------------------------------------------

AUGMENTATIONS = ("scale", "rotate", "blur", "brightness", "transpose")


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def _zoom_about_center(img, s):
    c = (np.asarray(img.shape) - 1) / 2
    matrix = np.eye(2) / s
    return ndimage.affine_transform(img, matrix, offset=c - matrix @ c, order=1, cval=0.0)


def augment(image, rng, scale=True, rotate=True, blur=True, brightness=True, transpose=True):
    """Random composition of the enabled transforms on a ``(1, H, W)`` image.

    Every enabled transform is applied with a random magnitude, except
    transpose, which fires with probability 0.5.
    """
    if image.ndim != 3 or image.shape[0] != 1:
        raise T.DimensionError(f"augment expects (1, H, W), got {image.shape}")
    if transpose and image.shape[1] != image.shape[2]:
        raise T.DimensionError(f"transpose needs a square image, got {image.shape[1:]}")
    img = image[0].astype(np.float64)
    if scale:
        img = _zoom_about_center(img, rng.uniform(0.9, 1.1))
    if rotate:
        img = ndimage.rotate(img, rng.uniform(-10, 10), reshape=False, order=1, cval=0.0)
    if blur:
        sigma = rng.uniform(0, 1.0)
        if sigma > 0:
            img = ndimage.gaussian_filter(img, sigma)
    if brightness:
        img = adjust_brightness(img, rng.uniform(0.8, 1.2))
    if transpose and rng.random() < 0.5:
        img = img.T
    return np.clip(img, 0.0, 1.0).astype(image.dtype)[None]


# -- BN recalibration ------------------------------------------------------------------

def recalibrate_batchnorm(model, x, batch_size=64):
    """Replace BN running stats by the average batch statistics over ``x``.

    Weights are untouched.  Stats accumulated during augmented training
    describe augmented inputs; this re-estimates them on the clean ones.
    """
    bns = model.batchnorms()
    saved = [bn.momentum for bn in bns]
    seen = 0
    try:
        for start in range(0, len(x), batch_size):
            xb = x[start:start + batch_size]
            seen += len(xb)
            for bn in bns:
                bn.momentum = len(xb) / seen  # size-weighted running mean over batches
            model.forward(xb, train=True)
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m


# -- training loop ----------------------------------------------------------------------

@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    @property
    def losses(self):
        return [r["loss"] for r in self.records]

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())


def train(model, dataset, config, log_path=None, weights_path=None, on_epoch=None):
    """Train ``model`` on ``dataset`` (anything with ``.x`` and ``.y``).

    ``on_epoch(record, model)`` is called after each epoch.
    """
    x, y = dataset.x, np.asarray(dataset.y)
    if len(y) == 0:
        raise ValueError("empty training set")
    if y.min() < 0 or y.max() > 2:
        raise T.LabelError(f"labels must lie in {{0, 1, 2}}, got range [{y.min()}, {y.max()}]")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config.learning_rate, config.betas, config.eps)
    aug = config.augmentations
    any_aug = any(aug.values())
    trainlog = TrainLog()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(y))
        loss_sum, correct = 0.0, 0
        try:
            for start in range(0, len(order), config.effective_batch):
                group = order[start:start + config.effective_batch]
                batches = []
                for j in range(0, len(group), config.micro_batch):
                    idx = group[j:j + config.micro_batch]
                    xb = x[idx]
                    if any_aug:
                        xb = np.stack([augment(im, rng, **aug) for im in xb])
                    batches.append((xb, y[idx]))
                counted = []

                def loss_fn(m, batch, train=True):
                    loss = classification_loss(m, batch, train)
                    counted.append(classification_loss.last_correct)
                    return loss

                loss_sum += accumulate_and_step(model, batches, opt, loss_fn) * len(group)
                correct += sum(counted)
        except (OptimizerError, T.DimensionError, T.LabelError, T.DegenerateBatchError) as e:
            raise type(e)(f"epoch {epoch}: {e}") from e
        rec = {"epoch": epoch, "loss": loss_sum / len(y), "acc": correct / len(y),
               "lr": config.learning_rate}
        trainlog.records.append(rec)
        log.info("epoch %d loss %.4f acc %.3f", epoch, rec["loss"], rec["acc"])
        if log_path:
            trainlog.write(log_path)
        if on_epoch is not None:
            on_epoch(rec, model)
    if config.recalibrate_bn and config.epochs > 0:
        recalibrate_batchnorm(model, x)
    if weights_path:
        save_weights(model, weights_path)
    return trainlog
