"""Linear-probe evaluation of frozen representations and equivariance diagnostics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata, spearmanr

from .diffcore import MlpParams
from .losses import sigmoid
from .models import encode, predict_displacement, propagate
from .synthdata import Cohort, fold_split
from .trainer import DM_ARMS


class DegenerateLabelError(ValueError):
    """Only one class is present where both are required."""


class UnsupportedArmError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    patient_id: np.ndarray
    month: np.ndarray
    reps: np.ndarray
    labels: dict[int, np.ndarray]
    converted_already: np.ndarray

    def __len__(self) -> int:
        return len(self.patient_id)

    def subset(self, mask: np.ndarray) -> "EmbeddingTable":
        return EmbeddingTable(
            self.patient_id[mask],
            self.month[mask],
            self.reps[mask],
            {w: lab[mask] for w, lab in self.labels.items()},
            self.converted_already[mask],
        )

    def with_reps(self, reps: np.ndarray) -> "EmbeddingTable":
        return EmbeddingTable(self.patient_id, self.month, reps, self.labels, self.converted_already)

    def for_patients(self, patients) -> "EmbeddingTable":
        return self.subset(np.isin(self.patient_id, np.asarray(list(patients))))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        windows = sorted(self.labels)
        w.writerow(
            ["patient_id", "t"]
            + [f"converted_within_{k}" for k in windows]
            + [f"r{j}" for j in range(self.reps.shape[1])]
        )
        for i in range(len(self)):
            w.writerow(
                [int(self.patient_id[i]), int(self.month[i])]
                + [int(self.labels[k][i]) for k in windows]
                + [repr(float(v)) for v in self.reps[i]]
            )
        return buf.getvalue()


def extract_representations(encoder: MlpParams, cohort: Cohort, split: str | None = None) -> EmbeddingTable:
    """Encode clean (un-augmented) pre-conversion visits of one split (``None`` = all)."""
    mask = ~cohort.converted_already
    if split is not None:
        if split not in cohort.splits:
            raise ValueError(f"unknown split {split!r}")
        mask &= np.isin(cohort.patient_id, cohort.splits[split])
    if not mask.any():
        raise ValueError(f"split {split!r} has no pre-conversion visits")
    return EmbeddingTable(
        cohort.patient_id[mask],
        cohort.month[mask],
        encode(encoder, cohort.x[mask]),
        {w: lab[mask] for w, lab in cohort.labels.items()},
        cohort.converted_already[mask],
    )


# metrics -------------------------------------------------------------------


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count one half."""
    s, y = _binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelError("AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def prauc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of (recall gain) x precision."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateLabelError("PRAUC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_gain * precision))


def balanced_accuracy(scores, labels, threshold: float = 0.5) -> float:
    s, y = _binary(scores, labels)
    if y.all() or not y.any():
        raise DegenerateLabelError("balanced accuracy needs both classes")
    pred = s >= threshold
    tpr = np.mean(pred[y])
    tnr = np.mean(~pred[~y])
    return float(0.5 * (tpr + tnr))


# linear probe ------------------------------------------------------------------


@dataclass
class ProbeConfig:
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 32
    standardize: bool = True
    threshold: float = 0.5
    n_folds: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("probe.epochs, batch_size and lr must be positive")
        if self.n_folds < 2:
            raise ValueError("probe.n_folds must be >= 2")


@dataclass
class ProbeParams:
    weight: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray

    def scores(self, reps: np.ndarray) -> np.ndarray:
        z = (reps - self.mean) / self.scale
        return sigmoid(z @ self.weight + self.bias)


def train_linear_probe(table: EmbeddingTable, window: int, cfg: ProbeConfig | None = None) -> ProbeParams:
    """Logistic regression on frozen features, minibatch Adam on mean BCE."""
    cfg = cfg or ProbeConfig()
    cfg.validate()
    y = table.labels[window].astype(np.float64)
    if y.min() == y.max():
        raise DegenerateLabelError(f"window {window}: training labels contain one class")
    x = table.reps
    n, d = x.shape
    if cfg.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        mean, scale = np.zeros(d), np.ones(d)
    z = (x - mean) / scale

    rng = np.random.default_rng([cfg.seed, 11, window])
    w, b = np.zeros(d), 0.0
    mw, vw, mb, vb = np.zeros(d), np.zeros(d), 0.0, 0.0
    b1, b2, eps, t = 0.9, 0.999, 1e-8, 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            err = sigmoid(z[idx] @ w + b) - y[idx]
            gw = z[idx].T @ err / len(idx)
            gb = float(err.mean())
            t += 1
            mw = b1 * mw + (1 - b1) * gw
            vw = b2 * vw + (1 - b2) * gw * gw
            mb = b1 * mb + (1 - b1) * gb
            vb = b2 * vb + (1 - b2) * gb * gb
            c1, c2 = 1 - b1**t, 1 - b2**t
            w -= cfg.lr * (mw / c1) / (np.sqrt(vw / c2) + eps)
            b -= cfg.lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
    return ProbeParams(w, float(b), mean, scale)


def probe_metrics(probe: ProbeParams, table: EmbeddingTable, window: int, threshold: float = 0.5) -> dict:
    s = probe.scores(table.reps)
    y = table.labels[window]
    return {
        "auroc": auroc(s, y),
        "prauc": prauc(s, y),
        "bacc": balanced_accuracy(s, y, threshold),
    }


def evaluate_table(
    table: EmbeddingTable,
    splits: dict[str, list[int]],
    windows: list[int],
    cfg: ProbeConfig | None = None,
) -> dict:
    """Probe metrics per label window on the held-out test patients.

    ``auroc``/``prauc``/``bacc`` come from a probe fit on the whole
    train+val pool; ``fold_mean``/``fold_std`` summarize the probes fit on
    each k-fold training partition of that pool.
    """
    cfg = cfg or ProbeConfig()
    pool_ids = sorted(splits["train"] + splits["val"])
    pool = table.for_patients(pool_ids)
    test = table.for_patients(splits["test"])
    converter = {p: False for p in pool_ids}
    for p, lab in zip(pool.patient_id, np.any(np.stack(list(pool.labels.values())), axis=0)):
        converter[int(p)] |= bool(lab)
    folds = fold_split(pool_ids, [converter[p] for p in pool_ids], cfg.n_folds, cfg.seed)

    out = {}
    for w in windows:
        full = probe_metrics(train_linear_probe(pool, w, cfg), test, w, cfg.threshold)
        per_fold = []
        for k in range(cfg.n_folds):
            held = set(folds[k])
            train = pool.for_patients([p for p in pool_ids if p not in held])
            per_fold.append(probe_metrics(train_linear_probe(train, w, cfg), test, w, cfg.threshold))
        keys = ("auroc", "prauc", "bacc")
        out[str(w)] = {
            **full,
            "fold_mean": {k: float(np.mean([f[k] for f in per_fold])) for k in keys},
            "fold_std": {k: float(np.std([f[k] for f in per_fold])) for k in keys},
        }
    return out


# equivariance module at evaluation time -----------------------------------


def tc_syn_table(
    table: EmbeddingTable, predictor: MlpParams, months: int = 6, arm: str = "tc"
) -> EmbeddingTable:
    """Average each representation with its forward propagation by ``months``."""
    if arm not in DM_ARMS:
        raise UnsupportedArmError(f"arm {arm!r} has no displacement-map predictor")
    future = propagate(predictor, table.reps, months / 12.0)
    return table.with_reps((table.reps + future) / 2.0)


COMPOSITION_PAIRS = ((3, 3), (6, 6), (4, 8))


@dataclass
class Diagnostics:
    dm_norm_mean: float
    dm_norm_min: float
    dm_norm_max: float
    dt_sensitivity: float
    distance_table: list[dict] = field(default_factory=list)
    spearman: float = float("nan")
    # mean |h(h(r, a), b) - h(r, a + b)| per (a, b) month pair; reported, not enforced
    composition_gap: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "collapse": {
                "dm_norm_mean": self.dm_norm_mean,
                "dm_norm_min": self.dm_norm_min,
                "dm_norm_max": self.dm_norm_max,
                "dt_sensitivity": self.dt_sensitivity,
            },
            "distance_table": self.distance_table,
            "spearman_dt_distance": self.spearman,
            "composition_gap": self.composition_gap,
        }

    def distance_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dt_months", "mean_distance", "std_distance"])
        for row in self.distance_table:
            w.writerow([row["dt_months"], repr(row["mean_distance"]), repr(row["std_distance"])])
        return buf.getvalue()


def equivariance_diagnostics(
    encoder: MlpParams,
    predictor: MlpParams,
    cohort: Cohort,
    months_list=tuple(range(1, 10)),
    n_patients: int = 40,
    delta: float = 1e-3,
    arm: str = "tc",
) -> Diagnostics:
    """Displacement norms and propagated distances from baseline visits.

    Uses the month-0 observation of the first ``n_patients`` patients and
    propagates it by each gap in ``months_list``.
    """
    if arm not in DM_ARMS:
        raise UnsupportedArmError(f"arm {arm!r} has no displacement-map predictor")
    first = np.flatnonzero(cohort.month == 0)[:n_patients]
    r0 = encode(encoder, cohort.x[first])
    norms, table, sens = [], [], []
    for m in months_list:
        dt = m / 12.0
        moved = propagate(predictor, r0, dt)
        dist = np.linalg.norm(moved - r0, axis=1)
        norms.append(np.linalg.norm(predict_displacement(predictor, r0, dt), axis=1))
        table.append(
            {"dt_months": int(m), "mean_distance": float(dist.mean()), "std_distance": float(dist.std())}
        )
        dt2 = min(dt + delta, 1.0)
        step = dt2 - dt if dt2 > dt else -delta
        moved2 = propagate(predictor, r0, dt + step)
        sens.append(np.mean(np.linalg.norm(moved2 - moved, axis=1)) / abs(step))
    allnorms = np.concatenate(norms)
    means = [row["mean_distance"] for row in table]
    rho = float("nan")
    if len(means) > 1 and np.ptp(means) > 0:
        rho = float(spearmanr(list(months_list), means).statistic)
    gaps = {}
    for a, b in COMPOSITION_PAIRS:
        twice = propagate(predictor, propagate(predictor, r0, a / 12.0), b / 12.0)
        once = propagate(predictor, r0, (a + b) / 12.0)
        gaps[f"{a}+{b}"] = float(np.mean(np.linalg.norm(twice - once, axis=1)))
    return Diagnostics(
        float(allnorms.mean()),
        float(allnorms.min()),
        float(allnorms.max()),
        float(np.mean(sens)),
        table,
        rho,
        gaps,
    )
