"""Mini-batch Adam training with early stopping, plus the cross-validation,
grid-search, and ablation drivers.

Randomness is organized as one stream per purpose: parameter init draws from
(seed, fold, 0) and the epoch-e shuffle from (seed, fold, e), so folds can
run in parallel (and even in separate processes) without sharing state while
staying bit-reproducible.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import kfold_split
from .errors import ConfigError, DataError, TrainingError
from .evaluation import PredictionSet, accuracy, auc
from .model import Batch, ModelConfig, Parameters, VARIANTS, batch_loss_and_grads, batch_predictions

# hyper-parameter grids used when nothing narrower is requested
DEFAULT_LAMBDA_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)
DEFAULT_LR_GRID = (1e-3, 1e-4, 1e-5)
DEFAULT_DIM_GRID = (64, 256)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    fold: int = 0
    grad_clip: float = 5.0  # global norm; None or 0 disables
    max_updates: int = 0  # 0 means unlimited
    stop_at_train_loss: float = 0.0  # 0 means never

    def __post_init__(self):
        # lr = 0 is allowed so the no-op update path stays exercisable
        if not (self.lr >= 0):
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def clip_gradients(grads, max_norm):
    """Scale all gradients together so the global norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / total
        return {k: g * scale for k, g in grads.items()}, total
    return grads, total

def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, arr in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        arr -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class EarlyStopping:
    """Strict-improvement patience rule on a maximized metric.

    ``update`` returns False once the last improvement is ``patience`` epochs
    old; with patience 10, a best at epoch 2 stops training after epoch 12.
    """

    def __init__(self, patience):
        self.patience = patience
        self.best_value = -np.inf
        self.best_epoch = 0

    def update(self, epoch, value):
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = epoch
        return epoch - self.best_epoch < self.patience


@dataclass
class TrainReport:
    best_epoch: int
    epochs_run: int
    total_updates: int
    stop_reason: str
    train_losses: list
    valid_aucs: list
    best_valid_auc: float
    best_params: Parameters = field(repr=False, default=None)

    def epoch_rows(self):
        return [
            {"epoch": e + 1, "train_loss": tl, "valid_auc": va}
            for e, (tl, va) in enumerate(zip(self.train_losses, self.valid_aucs))
        ]


def _epoch_batches(seqs, order, size):
    for i in range(0, len(order), size):
        yield Batch([seqs[j] for j in order[i : i + size]])


def predictions_over(params, seqs, batch_size, config=None):
    """Masked flat predictions/labels over sequences in their given order."""
    preds, labels = [], []
    for i in range(0, len(seqs), batch_size):
        p, t = batch_predictions(params, Batch(seqs[i : i + batch_size]), config)
        preds.append(p)
        labels.append(t)
    return np.concatenate(preds), np.concatenate(labels)


def train(model_cfg, train_cfg, train_seqs, valid_seqs):
    """Adam-train one model; keeps the best-validation-AUC parameter copy."""
    if not train_seqs or not valid_seqs:
        raise DataError("train and valid sets must be non-empty")
    params = Parameters.init(model_cfg, seed=(train_cfg.seed, train_cfg.fold, 0))
    state = AdamState(params)
    stopper = EarlyStopping(train_cfg.patience)
    best_params = params.copy()
    best_auc = -np.inf

    train_losses, valid_aucs = [], []
    updates = 0
    stop_reason = "max_epochs"
    for epoch in range(1, train_cfg.max_epochs + 1):
        rng = np.random.default_rng((train_cfg.seed, train_cfg.fold, epoch))
        order = rng.permutation(len(train_seqs))
        loss_sum = 0.0
        weight_sum = 0.0
        hit_update_limit = False
        for batch in _epoch_batches(train_seqs, order, train_cfg.batch_size):
            loss, grads = batch_loss_and_grads(params, batch, model_cfg)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"diverged: non-finite loss at epoch {epoch}, update {updates + 1}"
                )
            grads, _ = clip_gradients(grads, train_cfg.grad_clip)
            adam_step(params.tensors, grads, state, train_cfg)
            updates += 1
            loss_sum += loss * batch.n_preds
            weight_sum += batch.n_preds
            if train_cfg.stop_at_train_loss and loss < train_cfg.stop_at_train_loss:
                stop_reason = "train_loss"
                break
            if train_cfg.max_updates and updates >= train_cfg.max_updates:
                hit_update_limit = True
                stop_reason = "max_updates"
                break

        train_losses.append(loss_sum / weight_sum)
        preds, labels = predictions_over(params, valid_seqs, train_cfg.batch_size, model_cfg)
        epoch_auc = auc(PredictionSet(preds, labels))
        valid_aucs.append(epoch_auc)
        if epoch_auc > best_auc:
            best_auc = epoch_auc
            best_params = params.copy()
        keep_going = stopper.update(epoch, epoch_auc)
        if stop_reason in ("train_loss",) or hit_update_limit:
            break
        if not keep_going:
            stop_reason = "early_stop"
            break

    return TrainReport(
        best_epoch=stopper.best_epoch,
        epochs_run=len(train_losses),
        total_updates=updates,
        stop_reason=stop_reason,
        train_losses=train_losses,
        valid_aucs=valid_aucs,
        best_valid_auc=float(best_auc),
        best_params=best_params,
    )


@dataclass
class FoldResult:
    fold: int
    test_auc: float
    test_acc: float
    report: TrainReport


@dataclass
class CvReport:
    folds: list
    mean_auc: float
    std_auc: float
    mean_acc: float
    std_acc: float

    @classmethod
    def from_folds(cls, folds):
        aucs = np.array([f.test_auc for f in folds])
        accs = np.array([f.test_acc for f in folds])
        return cls(
            folds=folds,
            mean_auc=float(aucs.mean()),
            std_auc=float(aucs.std()),  # population std, matching mean+/-std tables
            mean_acc=float(accs.mean()),
            std_acc=float(accs.std()),
        )

    def rows(self):
        out = [
            {"fold": f.fold, "auc": f.test_auc, "acc": f.test_acc, "best_epoch": f.report.best_epoch}
            for f in self.folds
        ]
        out.append({"fold": "mean", "auc": self.mean_auc, "acc": self.mean_acc, "best_epoch": ""})
        out.append({"fold": "std", "auc": self.std_auc, "acc": self.std_acc, "best_epoch": ""})
        return out


def _run_fold(args):
    ds, model_cfg, train_cfg, fold_i, fold_idx = args
    train_idx, valid_idx, test_idx = fold_idx
    seqs = ds.sequences
    report = train(
        model_cfg,
        replace(train_cfg, fold=fold_i),
        [seqs[i] for i in train_idx],
        [seqs[i] for i in valid_idx],
    )
    preds, labels = predictions_over(
        report.best_params, [seqs[i] for i in test_idx], train_cfg.batch_size, model_cfg
    )
    ps = PredictionSet(preds, labels)
    return FoldResult(fold_i, auc(ps), accuracy(ps), report)


def _map_jobs(fn, argss, jobs):
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, argss))
    return [fn(a) for a in argss]


def run_cv(ds, model_cfg, train_cfg, k=5, jobs=1):
    """k training runs over student-level folds; test metrics per fold."""
    folds = kfold_split(ds, k=k, seed=train_cfg.seed)
    argss = [(ds, model_cfg, train_cfg, i, folds[i]) for i in range(k)]
    return CvReport.from_folds(_map_jobs(_run_fold, argss, jobs))


def _run_cell(args):
    ds, model_cfg, train_cfg, fold_idx, cell = args
    lam, lr, dim = cell
    cfg = replace(model_cfg, lambda_aux=lam, dim=dim)
    tcfg = replace(train_cfg, lr=lr, fold=0)
    seqs = ds.sequences
    train_idx, valid_idx, _ = fold_idx
    report = train(cfg, tcfg, [seqs[i] for i in train_idx], [seqs[i] for i in valid_idx])
    return {"lambda": lam, "lr": lr, "d": dim, "valid_auc": report.best_valid_auc}


@dataclass
class GridResult:
    best: dict
    table: list


def grid_search(ds, model_cfg, train_cfg, lambdas=None, lrs=None, dims=None, jobs=1):
    """Evaluate every (lambda, lr, d) cell by validation AUC on fold 0.

    Ties break toward smaller d, then larger lambda, then larger lr.
    """
    lambdas = DEFAULT_LAMBDA_GRID if lambdas is None else tuple(lambdas)
    lrs = DEFAULT_LR_GRID if lrs is None else tuple(lrs)
    dims = DEFAULT_DIM_GRID if dims is None else tuple(dims)
    if not (lambdas and lrs and dims):
        raise ConfigError("grid axes must be non-empty")
    fold0 = kfold_split(ds, k=5, seed=train_cfg.seed)[0]
    cells = [(lam, lr, dim) for lam in lambdas for lr in lrs for dim in dims]
    argss = [(ds, model_cfg, train_cfg, fold0, cell) for cell in cells]
    table = _map_jobs(_run_cell, argss, jobs)
    best = max(table, key=lambda r: (r["valid_auc"], -r["d"], r["lambda"], r["lr"]))
    return GridResult(best=best, table=table)


@dataclass
class AblationReport:
    per_variant: dict  # variant -> CvReport

    def rows(self):
        out = []
        for variant, cv in self.per_variant.items():
            out.append(
                {
                    "variant": variant,
                    "mean_auc": cv.mean_auc,
                    "std_auc": cv.std_auc,
                    "mean_acc": cv.mean_acc,
                    "std_acc": cv.std_acc,
                }
            )
        return out


def run_ablation(ds, model_cfg, train_cfg, k=5, variants=VARIANTS, jobs=1):
    """run_cv once per variant with shared folds, seeds, and sizes."""
    per_variant = {}
    for variant in variants:
        cfg = replace(model_cfg, variant=variant)
        per_variant[variant] = run_cv(ds, cfg, train_cfg, k=k, jobs=jobs)
    return AblationReport(per_variant)
