"""Linear probing, IoU metrics, corruption robustness scores and logs."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn

log = logging.getLogger(__name__)


class ConfusionMatrix:
    """Rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes) or np.any(self.counts < 0):
            raise ValueError("counts must be a non-negative square matrix")

    def update(self, truth, pred):
        truth = np.asarray(truth, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if truth.shape != pred.shape:
            raise ValueError("truth and prediction lengths differ")
        idx = truth * self.num_classes + pred
        self.counts += np.bincount(idx, minlength=self.num_classes ** 2).reshape(self.counts.shape)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm: ConfusionMatrix):
    """Per-class IoU (NaN where a class is absent from truth and prediction)
    and their mean over the remaining classes."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(0) + cm.counts.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    mean = float(np.nanmean(iou)) if np.any(union > 0) else float("nan")
    return iou, mean


def write_metrics_csv(iou, path, class_names=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "iou"])
        for c, v in enumerate(iou):
            name = class_names[c] if class_names else str(c)
            w.writerow([name, "nan" if np.isnan(v) else f"{v:.6f}"])


# --- linear probing -------------------------------------------------------------

@dataclass
class ProbeConfig:
    steps: int = 200
    lr: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    # "whiten" (PCA, well conditioned), "standardize" (per column) or "none"
    normalize: str = "whiten"
    whiten_eps: float = 1e-4  # relative to the largest feature variance

    def __post_init__(self):
        if self.normalize not in ("whiten", "standardize", "none"):
            raise ValueError(f"unknown probe normalisation {self.normalize!r}")


@dataclass
class ProbeResult:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    transform: np.ndarray
    iou: np.ndarray
    miou: float
    accuracy: float
    confusion: ConfusionMatrix

    def predict(self, feats):
        z = (np.asarray(feats) - self.mean) @ self.transform
        return np.argmax(z @ self.weight + self.bias, axis=1)


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _input_transform(feats, cfg: ProbeConfig):
    """Affine map applied before the head.  The head stays linear in the
    features; this only conditions the optimisation."""
    d = feats.shape[1]
    if cfg.normalize == "none":
        return np.zeros(d), np.eye(d)
    mean = feats.mean(0)
    if cfg.normalize == "standardize":
        return mean, np.diag(1.0 / (feats.std(0) + 1e-8))
    evals, evecs = np.linalg.eigh(np.cov(feats - mean, rowvar=False).reshape(d, d))
    evals = np.maximum(evals, 0.0)
    return mean, evecs / np.sqrt(evals + cfg.whiten_eps * max(evals.max(), 1e-12))


def linear_probe(encoder, train_x, train_y, val_x, val_y, num_classes: int,
                 cfg: ProbeConfig | None = None) -> ProbeResult:
    """Train a linear classifier on frozen per-point features.

    ``encoder`` is a frozen :class:`nn.Module` whose ``embed`` method maps
    ``train_x``/``val_x`` to feature rows, or ``None`` when they already are
    features.  Only the head is optimised; the encoder parameters
    are checksummed before and after.
    """
    cfg = cfg or ProbeConfig()
    before = None
    if encoder is not None:
        if any(p.requires_grad for p in encoder.parameters()):
            raise ValueError("encoder must be frozen before probing")
        before = param_checksum(encoder)
        ftr, fva = encoder.embed(train_x), encoder.embed(val_x)
    else:
        ftr, fva = np.asarray(train_x, dtype=np.float64), np.asarray(val_x, dtype=np.float64)
    mean, transform = _input_transform(ftr, cfg)
    ztr = (ftr - mean) @ transform

    rng = np.random.default_rng(cfg.seed)
    w = nn.Tensor(rng.normal(0, 0.01, (ftr.shape[1], num_classes)), True)
    b = nn.Tensor(np.zeros(num_classes), True)
    opt = nn.SGD([w, b], cfg.lr, max(cfg.steps, 1), cfg.momentum, cfg.weight_decay, 0.0)
    x = nn.Tensor(ztr)
    y = np.asarray(train_y, dtype=np.int64)
    for _ in range(cfg.steps):
        opt.zero_grad()
        loss = nn.cross_entropy(nn.add(nn.matmul(x, w), b), y)
        loss.backward()
        opt.step()

    if before is not None and param_checksum(encoder) != before:
        raise RuntimeError("frozen encoder parameters changed during probing")
    res = ProbeResult(w.data.copy(), b.data.copy(), mean, transform, None, 0.0, 0.0, None)
    pred = res.predict(fva)
    cm = ConfusionMatrix(num_classes).update(val_y, pred)
    res.iou, res.miou = miou(cm)
    res.accuracy = float(np.mean(pred == np.asarray(val_y)))
    res.confusion = cm
    return res


# --- robustness -------------------------------------------------------------------

@dataclass
class RobustnessReport:
    corruptions: list
    miou: np.ndarray
    baseline_miou: np.ndarray
    clean_miou: float
    ce: np.ndarray
    rr: np.ndarray
    mce: float
    mrr: float


def robustness_scores(subject, baseline, clean_miou: float, names=None) -> RobustnessReport:
    """Corruption error ``(1 - mIoU)/(1 - mIoU_baseline)`` and resilience rate
    ``mIoU / mIoU_clean`` per corruption, plus their means."""
    subject = np.asarray(subject, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if subject.shape != baseline.shape:
        raise ValueError("corruption lists are not aligned")
    if np.any(baseline >= 1.0):
        raise ValueError("baseline mIoU of 1 makes the corruption error undefined")
    ce = (1.0 - subject) / (1.0 - baseline)
    rr = subject / clean_miou
    names = list(names) if names is not None else [str(i) for i in range(len(subject))]
    return RobustnessReport(names, subject, baseline, clean_miou, ce, rr, float(ce.mean()), float(rr.mean()))


def write_robustness_csv(rep: RobustnessReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["corruption", "miou", "ce", "rr"])
        for name, m, ce, rr in zip(rep.corruptions, rep.miou, rep.ce, rep.rr):
            w.writerow([name, f"{m:.6f}", f"{ce:.6f}", f"{rr:.6f}"])
        fh.write(f"# clean_miou={rep.clean_miou:.6f}\n")
        fh.write(f"# mCE={100 * rep.mce:.4f}%\n")
        fh.write(f"# mRR={100 * rep.mrr:.4f}%\n")


# --- similarity maps ------------------------------------------------------------

def cosine_map(feats, query: int) -> np.ndarray:
    """Cosine similarity of every row of unit-norm ``feats`` to row ``query``.
    The query itself is pinned to exactly 1."""
    feats = np.asarray(feats, dtype=np.float64)
    if not 0 <= query < len(feats):
        raise IndexError(f"query {query} outside 0..{len(feats) - 1}")
    out = np.clip(feats @ feats[query], -1.0, 1.0)
    out[query] = 1.0
    return out


# --- convergence log ------------------------------------------------------------

@dataclass
class ConvergenceLog:
    records: list = field(default_factory=list)

    def append(self, step: int, loss: float, lr: float, **parts):
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("step ids must increase")
        self.records.append({"step": step, "loss": loss, "lr": lr, **parts})

    def __len__(self):
        return len(self.records)

    def to_csv(self) -> str:
        extra = []
        for r in self.records:
            extra += [k for k in r if k not in ("step", "loss", "lr") and k not in extra]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", *extra])
        for r in self.records:
            w.writerow([r["step"], repr(float(r["loss"])), repr(float(r["lr"]))]
                       + [repr(float(r[k])) if k in r else "" for k in extra])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "ConvergenceLog":
        out = cls()
        with open(path) as fh:
            for row in csv.DictReader(fh):
                parts = {k: float(v) for k, v in row.items() if k not in ("step", "loss", "lr") and v != ""}
                out.append(int(row["step"]), float(row["loss"]), float(row["lr"]), **parts)
        return out
