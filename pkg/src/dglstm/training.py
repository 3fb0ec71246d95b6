"""Training loops, grouped cross-validation, and evaluation metrics.

Optimization is Adam with the non-negativity projection applied after every
step (see numeric.adam_step); early stopping watches validation joint loss
with a fixed patience and the returned model carries the best-epoch weights.
All shuffling and dropout randomness is derived from (seed, fold, epoch) so
a rerun with the same seed reproduces the history exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from .data import SubjectRecord, WindowSample, make_windows
from .errors import ConfigError, DataError, DegenerateStatsError
from .model import ModelParams, backward_joint, build_model, forward_discriminative, joint_loss
from .numeric import AdamState, adam_step, derived_rng, seeded_rng

DECISION_THRESHOLD = 0.5


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    variant: str = "dg"
    k1: int = 50
    k2: int = 20
    window: int = 30
    dropout: float = 0.5
    lam: float = 0.1
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size {self.batch_size} must be >= 1")
        if self.patience < 1:
            raise ConfigError(f"patience {self.patience} must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs {self.max_epochs} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


def stack_windows(samples: list[WindowSample]) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Pack a window list into (X (N,T,R), targets (N,R) or None, y (N,))."""
    if not samples:
        raise DataError("empty window list")
    x = np.stack([s.x for s in samples])
    y = np.asarray([s.label for s in samples], dtype=float)
    if samples[0].target is None:
        return x, None, y
    targets = np.stack([s.target for s in samples])
    return x, targets, y


def windows_for_subjects(subjects: list[SubjectRecord], t: int,
                         require_target: bool) -> list[WindowSample]:
    out = []
    for rec in subjects:
        out.extend(make_windows(rec, t, require_target))
    return out


def predict_windows(model: ModelParams, x: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Class probabilities for a stack of windows, evaluated in chunks."""
    parts = [forward_discriminative(model, x[i:i + chunk])
             for i in range(0, x.shape[0], chunk)]
    return np.concatenate([np.atleast_1d(p) for p in parts])


def _eval_joint_loss(model: ModelParams, x: np.ndarray, targets: np.ndarray | None,
                     y: np.ndarray, lam: float, chunk: int = 2048) -> float:
    """Inference-mode joint loss over a full window set."""
    from .model import _forward  # shared cache path; dropout off

    yhats, xhats = [], []
    for i in range(0, x.shape[0], chunk):
        cache = _forward(model, x[i:i + chunk], training=False, rng=None,
                         want_generative=targets is not None and model.has_generative)
        yhats.append(cache.yhat)
        if cache.xhat is not None:
            xhats.append(cache.xhat)
    yhat = np.concatenate(yhats)
    if xhats:
        return joint_loss(y, yhat, targets, np.concatenate(xhats), lam=lam).total
    return joint_loss(y, yhat, lam=lam).total


def train(model: ModelParams, train_windows: list[WindowSample],
          val_windows: list[WindowSample], cfg: TrainConfig, fold: int = 0,
          on_step=None, on_epoch=None) -> tuple[ModelParams, dict]:
    """Optimize `model` in place, return (best-epoch copy, history).

    on_step(step, model, loss) fires after every parameter update and
    on_epoch(epoch, train_loss, val_loss) after every epoch; both are
    observability hooks for tests and progress reporting.
    """
    cfg.validate()
    x_tr, t_tr, y_tr = stack_windows(train_windows)
    x_va, t_va, y_va = stack_windows(val_windows)
    wants_target = model.has_generative
    if wants_target and (t_tr is None or t_va is None):
        raise DataError("generative variants need windows with next-step targets")

    n = x_tr.shape[0]
    state = AdamState(model.params, alpha=cfg.learning_rate)
    best_val = math.inf
    best_params = model.params.copy()
    best_epoch = 0
    since_best = 0
    history = {"train_loss": [], "val_loss": []}
    step = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = derived_rng(cfg.seed, fold, epoch, 0).permutation(n)
        drop_rng = derived_rng(cfg.seed, fold, epoch, 1)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb = x_tr[idx]
            tb = t_tr[idx] if wants_target else None
            loss, grads = backward_joint(model, xb, y_tr[idx], x_next=tb,
                                         lam=cfg.lam, training=model.dropout > 0,
                                         rng=drop_rng)
            adam_step(model.params, grads, state)
            total += loss.total * idx.size
            step += 1
            if on_step is not None:
                on_step(step, model, loss)
        train_loss = total / n
        val_loss = _eval_joint_loss(model, x_va, t_va if wants_target else None,
                                    y_va, cfg.lam)
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = model.params.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    history["best_epoch"] = best_epoch
    history["best_val_loss"] = best_val
    history["epochs_run"] = epoch
    history["stopped_early"] = epoch < cfg.max_epochs
    best = ModelParams(variant=model.variant, r=model.r, k1=model.k1,
                       k2=model.k2, t=model.t, dropout=model.dropout,
                       params=best_params)
    return best, history


def grouped_kfold(subjects: list[SubjectRecord], k: int,
                  seed: int = 0) -> list[tuple[list, list, list]]:
    """Subject-grouped k-fold splits: shuffle once (seeded), cut into k
    near-equal folds; fold i is the test set, fold (i+1) mod k the
    validation set and the rest the training set. With k == 2 there is no
    "rest", so the non-test fold is split in half between train and val."""
    if k < 2:
        raise ConfigError(f"k={k}: need at least 2 folds")
    if k > len(subjects):
        raise ConfigError(f"k={k} exceeds the {len(subjects)} available subjects")
    order = seeded_rng(seed).permutation(len(subjects))
    folds = [list(chunk) for chunk in np.array_split(order, k)]
    splits = []
    for i in range(k):
        test = folds[i]
        if k == 2:
            rest = folds[1 - i]
            half = len(rest) // 2
            val, tr = rest[:half], rest[half:]
        else:
            val = folds[(i + 1) % k]
            tr = [j for f in range(k) if f not in (i, (i + 1) % k) for j in folds[f]]
        splits.append(([subjects[j] for j in tr], [subjects[j] for j in val],
                       [subjects[j] for j in test]))
    return splits


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC: fraction of positive/negative pairs ranked
    concordantly, ties counted half. Average ranks make that exact."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigError("scores and labels must be equal-length 1-D arrays")
    pos = labels == 1
    p, n = int(pos.sum()), int((~pos).sum())
    if p == 0 or n == 0:
        raise DegenerateStatsError("AUC undefined: only one class present")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - p * (p + 1) / 2.0) / (p * n))


@dataclass
class SubjectScore:
    subject_id: str
    label: int
    n_windows: int
    score: float

    @property
    def predicted(self) -> int:
        return int(self.score > DECISION_THRESHOLD)


@dataclass
class EvaluationResult:
    """Subject-level test metrics: the score of a subject is the fraction of
    its windows classified positive, and the subject is called positive when
    that fraction exceeds 0.5."""

    subjects: list[SubjectScore]
    counts: dict
    acc: float
    tpr: float
    tnr: float
    auc: float

    def to_json_dict(self) -> dict:
        return {
            "subjects": [{"subject_id": s.subject_id, "label": s.label,
                          "n_windows": s.n_windows, "score": s.score,
                          "predicted": s.predicted} for s in self.subjects],
            "counts": self.counts,
            "acc": self.acc, "tpr": self.tpr, "tnr": self.tnr,
            "auc": None if math.isnan(self.auc) else self.auc,
        }


def evaluate_subjects(model: ModelParams, subjects: list[SubjectRecord]) -> EvaluationResult:
    if not subjects:
        raise DataError("no subjects to evaluate")
    scored = []
    for rec in subjects:
        wins = make_windows(rec, model.t, require_target=False)
        x, _, _ = stack_windows(wins)
        yhat = predict_windows(model, x)
        frac = float(np.mean(yhat > DECISION_THRESHOLD))
        scored.append(SubjectScore(subject_id=rec.subject_id, label=rec.label,
                                   n_windows=len(wins), score=frac))
    labels = np.asarray([s.label for s in scored])
    preds = np.asarray([s.predicted for s in scored])
    tp = int(np.sum((preds == 1) & (labels == 1)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    counts = {"tp": tp, "tn": tn, "fp": fp, "fn": fn}
    acc = (tp + tn) / len(scored)
    tpr = tp / (tp + fn) if (tp + fn) else math.nan
    tnr = tn / (tn + fp) if (tn + fp) else math.nan
    try:
        area = auc(np.asarray([s.score for s in scored], dtype=float), labels)
    except DegenerateStatsError:
        area = math.nan
    return EvaluationResult(subjects=scored, counts=counts, acc=acc, tpr=tpr,
                            tnr=tnr, auc=area)


def student_t_sf(t: float, df: int) -> float:
    """Upper-tail probability P(T_df > t) via the regularized incomplete
    beta function."""
    if df < 1:
        raise ConfigError(f"degrees of freedom {df} must be >= 1")
    x = df / (df + t * t)
    tail = 0.5 * float(betainc(df / 2.0, 0.5, x))
    return tail if t >= 0 else 1.0 - tail


def paired_ttest_one_tailed(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Paired one-tailed t-test of H1: mean(a) > mean(b).

    t = mean(d) / (sd(d)/sqrt(n)) with the sample sd (n-1 denominator);
    returns (t, p) where p is the upper-tail probability under T_{n-1}."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError("paired samples must be equal-length 1-D arrays")
    n = a.size
    if n < 2:
        raise ConfigError(f"need at least 2 pairs, got {n}")
    d = a - b
    sd = d.std(ddof=1)
    # treat rounding-level spread as zero variance so that differences which
    # are constant up to float error (e.g. a uniform +0.1 shift) still hit
    # the degenerate path instead of producing an astronomically large t
    if sd <= 1e-12 * max(1.0, float(np.abs(d).max())):
        raise DegenerateStatsError("all paired differences identical: t undefined")
    t = float(d.mean() / (sd / math.sqrt(n)))
    return t, student_t_sf(t, n - 1)


@dataclass
class FoldReport:
    fold: int
    n_train: int
    n_val: int
    n_test: int
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    evaluation: EvaluationResult
    history: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        d = {"fold": self.fold, "n_train": self.n_train, "n_val": self.n_val,
             "n_test": self.n_test, "epochs_run": self.epochs_run,
             "best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss}
        d.update(self.evaluation.to_json_dict())
        d["history"] = self.history
        return d


def _run_fold(args) -> tuple[FoldReport, ModelParams]:
    fold, (tr, va, te), cfg = args
    r = tr[0].n_rois
    model = build_model(cfg.variant, r=r, k1=cfg.k1, k2=cfg.k2, t=cfg.window,
                        dropout=cfg.dropout, seed=[cfg.seed, 10, fold])
    need_target = model.has_generative
    best, history = train(model,
                          windows_for_subjects(tr, cfg.window, need_target),
                          windows_for_subjects(va, cfg.window, need_target),
                          cfg, fold=fold)
    report = FoldReport(fold=fold, n_train=len(tr), n_val=len(va), n_test=len(te),
                        epochs_run=history["epochs_run"],
                        best_epoch=history["best_epoch"],
                        best_val_loss=history["best_val_loss"],
                        evaluation=evaluate_subjects(best, te),
                        history={"train_loss": history["train_loss"],
                                 "val_loss": history["val_loss"]})
    return report, best


def crossval(subjects: list[SubjectRecord], cfg: TrainConfig, k: int,
             jobs: int = 1) -> tuple[list[FoldReport], list[ModelParams], dict]:
    """Grouped k-fold cross-validation. Returns per-fold reports, the
    best model of each fold, and an aggregate summary (fold means/sds plus
    the AUC over all test subjects pooled)."""
    splits = grouped_kfold(subjects, k, seed=cfg.seed)
    tasks = [(i, splits[i], cfg) for i in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    reports = [r for r, _ in results]
    models = [m for _, m in results]

    def fold_stats(vals):
        arr = np.asarray(vals, dtype=float)
        ok = arr[~np.isnan(arr)]
        if ok.size == 0:
            return math.nan, math.nan
        return float(ok.mean()), float(ok.std(ddof=1)) if ok.size > 1 else 0.0

    agg = {"k": k, "variant": cfg.variant, "seed": cfg.seed}
    for name in ("acc", "tpr", "tnr", "auc"):
        mean, sd = fold_stats([getattr(r.evaluation, name) for r in reports])
        agg[f"{name}_mean"] = mean
        agg[f"{name}_std"] = sd
    pooled_scores, pooled_labels = [], []
    for r in reports:
        pooled_scores.extend(s.score for s in r.evaluation.subjects)
        pooled_labels.extend(s.label for s in r.evaluation.subjects)
    try:
        agg["auc_pooled"] = auc(np.asarray(pooled_scores), np.asarray(pooled_labels))
    except DegenerateStatsError:
        agg["auc_pooled"] = math.nan
    return reports, models, agg
