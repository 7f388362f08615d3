"""Mini-batch NLL training with early stopping and k-fold cross-validation."""

import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from tppkit import autodiff as ad
from tppkit import rng as rngmod
from tppkit.data import Dataset, kfold_split, normalize_times
from tppkit.models import ModelConfig, NeuralTppModel, pad_batch


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    max_epochs: int = 100
    learning_rate: float = 1e-3
    patience: int = 10
    seed: int = 0
    n_folds: int = 5
    valid_fraction: float = 0.2

    def __post_init__(self):
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1")


@dataclass
class TrainReport:
    train_nll: list = field(default_factory=list)   # entry e: mean NLL during epoch e; None at 0
    valid_nll: list = field(default_factory=list)
    best_epoch: int = 0
    wall_clock_s: float = 0.0
    diverged: bool = False

    def to_dict(self) -> dict:
        return {
            "train_nll": self.train_nll,
            "valid_nll": self.valid_nll,
            "best_epoch": self.best_epoch,
            "wall_clock_s": self.wall_clock_s,
            "diverged": self.diverged,
        }

    def format_table(self) -> str:
        lines = [f"{'epoch':>5} {'train NLL':>12} {'valid NLL':>12}"]
        for e, (tr, va) in enumerate(zip(self.train_nll, self.valid_nll)):
            star = "  *" if e == self.best_epoch else ""
            tr_s = f"{tr:.4f}" if tr is not None else "-"
            lines.append(f"{e:>5} {tr_s:>12} {va:>12.4f}{star}")
        lines.append(f"best epoch {self.best_epoch}, {self.wall_clock_s:.1f}s"
                     + (", diverged" if self.diverged else ""))
        return "\n".join(lines)


class Adam:
    """Adaptive-moment optimizer over a named parameter dict."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / corr1
            vhat = self.v[name] / corr2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None


def make_batches(sequences, batch_size: int, seed: int, class_count: int,
                 static_dim: int | None = None) -> list[dict]:
    """Length-bucketed padded batches; masks mark real events.

    Sequences are ordered by length (seeded random tie-break) before being
    chunked, which keeps padding small; iterate in a shuffled order per epoch.
    """
    rng = rngmod.make_rng(seed)
    order = rng.permutation(len(sequences))
    order = sorted(order, key=lambda i: len(sequences[i]))
    batches = []
    for start in range(0, len(order), batch_size):
        part = [sequences[i] for i in order[start : start + batch_size]]
        batches.append(pad_batch(part, class_count, static_dim))
    return batches


def dataset_nll(model: NeuralTppModel, dataset: Dataset, batch_size: int = 1024,
                mc_seed: int = 0) -> float:
    """Mean per-sequence NLL over a dataset (evaluation mode)."""
    static_dim = dataset.static_dim if model.config.static_dim else None
    batches = make_batches(list(dataset.sequences), batch_size, 0,
                           model.config.class_count, static_dim)
    total, n = 0.0, 0
    with threadpool_limits(limits=1):
        for batch in batches:
            b = batch["mask"].shape[0]
            total += float(model.nll_batch(batch, train=False, mc_seed=mc_seed).data) * b
            n += b
    return total / max(n, 1)


def train(model: NeuralTppModel, train_set: Dataset, valid_set: Dataset,
          config: TrainConfig) -> tuple[NeuralTppModel, TrainReport]:
    """Adam on mean batch NLL with early stopping on validation NLL.

    Returns the model holding the best-epoch parameters. A non-finite loss
    aborts the run and restores the last finite best checkpoint.
    """
    with threadpool_limits(limits=1):  # tiny matrices; BLAS threads only thrash
        return _train_limited(model, train_set, valid_set, config)


def _train_limited(model, train_set, valid_set, config):
    t0 = time.perf_counter()
    static_dim = train_set.static_dim if model.config.static_dim else None
    batches = make_batches(list(train_set.sequences), config.batch_size,
                           config.seed, model.config.class_count, static_dim)
    optimizer = Adam(model.params, config.learning_rate)
    epoch_seeds = rngmod.split(config.seed, config.max_epochs + 1)

    report = TrainReport()
    init_valid = dataset_nll(model, valid_set)
    report.train_nll.append(None)  # no training pass at epoch 0
    report.valid_nll.append(init_valid)
    best_valid = init_valid
    best_params = {k: t.data.copy() for k, t in model.params.items()}
    best_epoch = 0
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        rng = rngmod.make_rng(epoch_seeds[epoch - 1])
        order = rng.permutation(len(batches))
        epoch_loss, n_seq = 0.0, 0
        diverged = False
        for bi in order:
            batch = batches[bi]
            with ad.Tape() as tape:
                loss = model.nll_batch(batch, train=True, rng=rng)
            value = float(loss.data)
            if not np.isfinite(value):
                diverged = True
                break
            ad.backward(tape, loss)
            optimizer.step()
            b = batch["mask"].shape[0]
            epoch_loss += value * b
            n_seq += b
        if diverged:
            report.diverged = True
            break
        report.train_nll.append(epoch_loss / max(n_seq, 1))
        valid = dataset_nll(model, valid_set)
        report.valid_nll.append(valid)
        if valid < best_valid:
            best_valid = valid
            best_epoch = epoch
            best_params = {k: t.data.copy() for k, t in model.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    for k, t in model.params.items():
        t.data = best_params[k]
    report.best_epoch = best_epoch
    report.wall_clock_s = time.perf_counter() - t0
    return model, report


def cross_validate(model_config: ModelConfig, dataset: Dataset, config: TrainConfig,
                   normalize: bool = True) -> dict:
    """k-fold protocol: one model per fold, evaluated on its test fold.

    Each fold normalizes times by its own training-split mean inter-event
    time. Returns the per-fold next-mark reports plus mean/std aggregates.
    """
    from tppkit.evaluation import evaluate_next_mark

    fold_reports = []
    train_reports = []
    for fold in range(config.n_folds):
        train_ds, valid_ds, test_ds = kfold_split(
            dataset, config.n_folds, fold, config.valid_fraction, config.seed
        )
        if normalize:
            valid_ds = normalize_times(valid_ds, reference=train_ds)
            test_ds = normalize_times(test_ds, reference=train_ds)
            train_ds = normalize_times(train_ds)
        model = NeuralTppModel(replace(model_config, seed=model_config.seed + fold))
        fold_cfg = replace(config, seed=config.seed + 1000003 * fold)
        model, treport = train(model, train_ds, valid_ds, fold_cfg)
        fold_reports.append(evaluate_next_mark(model, test_ds))
        train_reports.append(treport)

    acc = np.array([r.accuracy for r in fold_reports])
    wf1 = np.array([r.weighted_f1 for r in fold_reports])
    return {
        "fold_reports": fold_reports,
        "train_reports": train_reports,
        "mean_accuracy": float(acc.mean()),
        "std_accuracy": float(acc.std()),
        "mean_weighted_f1": float(wf1.mean()),
        "std_weighted_f1": float(wf1.std()),
    }
