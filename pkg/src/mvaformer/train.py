"""
Training (BCE + AdamW + cosine decay), macro-averaged multi-label metrics and
the comparison battery of baselines.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ContractError, EvaluationError, TrainingDiverged
from .model import TOKENS, Mode, MVAFormer

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 25
    lr0: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threshold: float = 0.5
    seed: int = 0
    train_fraction: float = 0.7
    split_tolerance: float = 0.1
    min_support: int = 5
    single_view: int = 0
    eval_every_epoch: bool = True

    def __post_init__(self):
        if not self.lr0 > self.lr_min > 0:
            raise ContractError(f"need lr0 > lr_min > 0, got {self.lr0}, {self.lr_min}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ContractError("batch_size must be positive and epochs non-negative")

    @classmethod
    def desk(cls, **overrides):
        """Default recipe with the batch and epoch budget scaled down for a CPU."""
        return replace(cls(batch_size=32, epochs=10), **overrides)


# -- loss, optimizer, schedule ----------------------------------------------------
def bce_loss(probs, targets):
    """Mean binary cross-entropy over all (person, class) pairs."""
    return ad.binary_cross_entropy(probs, targets)


def cosine_lr(step, total_steps, lr0=1e-4, lr_min=1e-6):
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * step / total_steps))


def decays(name):
    """Weight decay applies to linear weights only."""
    return name.endswith(".weight")


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr):
    """
    One decoupled-weight-decay Adam update, in place.

    ``params`` and ``grads`` map names to arrays; missing grads count as zero.
    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ContractError(f"{name}: grad {g.shape} vs param {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(name):
            update = update + state.weight_decay * theta
        theta -= (lr * update).astype(theta.dtype)
    return params, state


# -- metrics ----------------------------------------------------------------------------
@dataclass
class MetricReport:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f: np.ndarray
    included: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f: float

    @property
    def excluded(self):
        return [int(i) for i in np.flatnonzero(~self.included)]

    def to_csv(self):
        lines = ["class,tp,fp,fn,precision,recall,f"]
        for k in range(len(self.tp)):
            lines.append(f"{k},{int(self.tp[k])},{int(self.fp[k])},{int(self.fn[k])},"
                         f"{self.precision[k]:.6f},{self.recall[k]:.6f},{self.f[k]:.6f}")
        lines.append(f"macro,,,,{self.macro_precision:.6f},{self.macro_recall:.6f},{self.macro_f:.6f}")
        return "\n".join(lines) + "\n"


def _safe_div(a, b):
    return np.divide(a, b, out=np.zeros_like(a, dtype=np.float64), where=b > 0)


def compute_metrics(pred_labels, targets, min_support=5):
    """
    Per-class counts and P/R/F, macro-averaged over classes whose number of
    positive targets reaches ``min_support``.  Macro F is the mean of the
    per-class F values.
    """
    pred = np.asarray(pred_labels).astype(bool)
    true = np.asarray(targets).astype(bool)
    tp = (pred & true).sum(axis=0).astype(np.float64)
    fp = (pred & ~true).sum(axis=0).astype(np.float64)
    fn = (~pred & true).sum(axis=0).astype(np.float64)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f = _safe_div(2 * precision * recall, precision + recall)
    included = (tp + fn) >= min_support
    if not included.any():
        raise EvaluationError(f"no class has at least {min_support} positive instances")
    return MetricReport(tp, fp, fn, precision, recall, f, included,
                        float(precision[included].mean()), float(recall[included].mean()),
                        float(f[included].mean()))


# -- model driver -----------------------------------------------------------------------
def _forward(model, dataset, samples, views, rng=None):
    videos, index, boxes, labels = dataset.batch(samples, views)
    probs, _ = model.forward(videos, index, boxes, rng=rng)
    return probs, labels


def predict(model, dataset, samples, views=None, batch_size=64):
    out = []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            probs, _ = _forward(model, dataset, samples[i:i + batch_size], views)
            out.append(probs.data)
    if not out:
        return np.zeros((0, model.config.classes))
    return np.concatenate(out)


def evaluate(model, dataset, samples, threshold=0.5, min_support=5, views=None):
    if not samples:
        raise EvaluationError("empty evaluation split")
    probs = predict(model, dataset, samples, views)
    labels = np.stack([s.labels for s in samples])
    return compute_metrics(probs >= threshold, labels, min_support)


@dataclass
class TrainLog:
    batches: list = field(default_factory=list)  # (epoch, batch, lr, loss)
    epochs: list = field(default_factory=list)   # (epoch, mean loss, P, R, F)

    def batch_csv(self):
        rows = ["epoch,batch,lr,loss"] + [f"{e},{b},{lr:.9g},{loss:.9g}" for e, b, lr, loss in self.batches]
        return "\n".join(rows) + "\n"

    def epoch_csv(self):
        rows = ["epoch,loss,precision,recall,f"]
        for e, loss, p, r, f in self.epochs:
            rows.append(f"{e},{loss:.9g},{p:.6f},{r:.6f},{f:.6f}")
        return "\n".join(rows) + "\n"


def train(dataset, train_samples, model_config, train_config, eval_samples=None, views=None):
    """
    Fit a model on ``train_samples``; one batch element is one person.

    Shuffling, initialization and dropout are all seeded from
    ``train_config.seed``.  Returns (model, TrainLog).
    """
    if not train_samples:
        raise ContractError("empty training split")
    model = MVAFormer(model_config, seed=train_config.seed)
    params = dict(model.named_parameters())
    state = OptimizerState(train_config.beta1, train_config.beta2, train_config.eps, train_config.weight_decay)
    rng = np.random.default_rng([train_config.seed, 7])
    drop_rng = np.random.default_rng([train_config.seed, 11]) if model_config.dropout > 0 else None
    bs = train_config.batch_size
    per_epoch = math.ceil(len(train_samples) / bs)
    total = per_epoch * train_config.epochs
    log = TrainLog()
    step = 0
    for epoch in range(train_config.epochs):
        order = rng.permutation(len(train_samples))
        losses = []
        for b in range(per_epoch):
            batch = [train_samples[i] for i in order[b * bs:(b + 1) * bs]]
            lr = cosine_lr(step, total, train_config.lr0, train_config.lr_min)
            model.zero_grad()
            probs, labels = _forward(model, dataset, batch, views, drop_rng)
            loss = bce_loss(probs, labels)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}")
            ad.backward(loss)
            adamw_step({n: p.data for n, p in params.items()},
                       {n: p.grad for n, p in params.items() if p.grad is not None}, state, lr)
            log.batches.append((epoch, b, lr, value))
            losses.append(value)
            step += 1
        p = r = f = float("nan")
        if eval_samples and train_config.eval_every_epoch:
            try:
                rep = evaluate(model, dataset, eval_samples, train_config.threshold,
                               train_config.min_support, views)
                p, r, f = rep.macro_precision, rep.macro_recall, rep.macro_f
            except Exception as exc:  # metrics are diagnostic during training
                logger.debug("epoch %d evaluation skipped: %s", epoch, exc)
        log.epochs.append((epoch, float(np.mean(losses)), p, r, f))
        logger.info("epoch %d loss %.4f macro-F %.4f", epoch, np.mean(losses), f)
    return model, log


# -- baselines ------------------------------------------------------------------------
METHODS = ("single_view", "ensemble", "pooled", "vanilla", "sva_dva")


def estimate_flops(model_config, frames, height, width):
    """Analytic multiply-add count of one person's forward pass (x2 for FLOPs)."""
    c, m, p = model_config.channels, model_config.views, model_config.patch
    hw = (height // p) * (width // p)
    enc = frames * hw * (p * p * 3) * c + hw * 2 * c * (model_config.ffn_mult * c)
    roi = TOKENS * hw * c
    s = m if model_config.mode is Mode.POOLED_VECTOR else m * TOKENS
    attn = 4 * s * c * c + 2 * s * s * c
    n_attn = 2 if model_config.mode is Mode.SVA_DVA else 1
    layer = n_attn * attn + 2 * s * c * model_config.ffn_mult * c
    head = model_config.layers * layer + c * model_config.classes
    return 2 * (m * (enc + roi) + head)


@dataclass
class ComparisonRow:
    method: str
    report: MetricReport
    flops: float

    def csv(self):
        r = self.report
        return f"{self.method},{r.macro_precision:.6f},{r.macro_recall:.6f},{r.macro_f:.6f},{self.flops:.0f}"


def comparison_csv(rows):
    return "method,precision,recall,f,flops_estimate\n" + "".join(r.csv() + "\n" for r in rows)


def run_baselines(dataset, train_samples, eval_samples, model_config, train_config, methods=METHODS):
    """
    Train and evaluate each method with the same seed and budget.

    single_view  one model on ``train_config.single_view`` only
    ensemble     one model per view, probabilities averaged before thresholding
    pooled       crops averaged to vectors, self-attention over views
    vanilla      full self-attention over all view tokens
    sva_dva      divided same-view / different-view attention
    """
    cfg = dataset.config
    m = model_config.views
    if m < 2:
        raise ContractError("baselines need at least two views")
    rows = []
    labels = np.stack([s.labels for s in eval_samples])
    single_cfg = replace(model_config, views=1, mode=Mode.VANILLA_SELF)

    def flops(mc):
        return estimate_flops(mc, cfg.frames, cfg.height, cfg.width)

    for method in methods:
        logger.info("training %s", method)
        if method == "single_view":
            v = [train_config.single_view]
            model, _ = train(dataset, train_samples, single_cfg, train_config, views=v)
            rep = evaluate(model, dataset, eval_samples, train_config.threshold, train_config.min_support, v)
            rows.append(ComparisonRow(method, rep, flops(single_cfg)))
        elif method == "ensemble":
            probs = []
            for view in range(m):
                model, _ = train(dataset, train_samples, single_cfg, train_config, views=[view])
                probs.append(predict(model, dataset, eval_samples, [view]))
            mean = np.mean(probs, axis=0)
            rep = compute_metrics(mean >= train_config.threshold, labels, train_config.min_support)
            rows.append(ComparisonRow(method, rep, m * flops(single_cfg)))
        else:
            mode = {"pooled": Mode.POOLED_VECTOR, "vanilla": Mode.VANILLA_SELF, "sva_dva": Mode.SVA_DVA}[method]
            mc = replace(model_config, mode=mode)
            model, _ = train(dataset, train_samples, mc, train_config)
            rep = evaluate(model, dataset, eval_samples, train_config.threshold, train_config.min_support)
            rows.append(ComparisonRow(method, rep, flops(mc)))
    return rows
