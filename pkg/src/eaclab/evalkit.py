"""Editing metrics, weight-deviation statistics and PCA fact-drift analysis.

Metrics take a *predictor*: anything with ``predict(prompts) -> list[str]``
(greedy next word per prompt) and a ``version`` tag. :class:`LMPredictor`
wraps a model and tokenizer; :class:`TablePredictor` is a fixed lookup used
for hand-built fixtures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import microlm as lm
from . import numgrad as ng
from .editcore import FactEdit

DRIFT_FORMAT = "eaclab-drift/1"


class ContractError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class Predictor(Protocol):
    version: object

    def predict(self, prompts: Sequence[str]) -> list[str]: ...


class LMPredictor:
    def __init__(self, model: lm.MicroLM, tok: lm.Tokenizer):
        self.model = model
        self.tok = tok

    @property
    def version(self) -> int:
        return self.model.version

    def predict(self, prompts: Sequence[str]) -> list[str]:
        if not prompts:
            return []
        ids = lm.predict_next(self.model, [self.tok.encode(p) for p in prompts])
        return [self.tok.words[i] for i in ids]


class TablePredictor:
    def __init__(self, table: dict[str, str], version: object = 0):
        self.table = dict(table)
        self.version = version

    def predict(self, prompts: Sequence[str]) -> list[str]:
        return [self.table.get(p, "<unk>") for p in prompts]


@dataclass
class PredictionCache:
    """Greedy predictions of one model version on a fixed prompt set."""

    version: object
    predictions: dict[str, str]

    @classmethod
    def build(cls, predictor: Predictor, prompts: Sequence[str]) -> "PredictionCache":
        uniq = list(dict.fromkeys(prompts))
        return cls(predictor.version, dict(zip(uniq, predictor.predict(uniq))))

    def check(self, predictor: Predictor) -> None:
        if predictor.version != self.version:
            raise StaleCacheError(
                f"prediction cache is for model version {self.version!r}, model is at {predictor.version!r}"
            )


@dataclass
class EditEvalCase:
    fact: FactEdit
    rephrases: list[str] = field(default_factory=list)
    locality_probes: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        scope = self.in_scope()
        clash = [p for p, _ in self.locality_probes if p in scope]
        if clash:
            raise ContractError(f"{self.fact.id}: locality probes overlap the edit scope: {clash}")

    @classmethod
    def from_fact(cls, fact: FactEdit) -> "EditEvalCase":
        return cls(fact, fact.rephrase_prompts(), list(fact.locality))

    def in_scope(self) -> set[str]:
        return {self.fact.prompt, *self.rephrases}


def _nonempty(cases) -> list[EditEvalCase]:
    cases = list(cases)
    if not cases:
        raise ContractError("no evaluation cases")
    return cases


def reliability_fraction(model: Predictor, cases: Sequence[EditEvalCase]) -> Fraction:
    cases = _nonempty(cases)
    preds = model.predict([c.fact.prompt for c in cases])
    return Fraction(sum(p == c.fact.target for p, c in zip(preds, cases)), len(cases))


def generalization_fraction(model: Predictor, cases: Sequence[EditEvalCase]) -> Fraction:
    cases = _nonempty(cases)
    prompts, targets = [], []
    for c in cases:
        if not c.rephrases:
            raise ContractError(f"{c.fact.id}: no rephrases")
        prompts += c.rephrases
        targets += [c.fact.target] * len(c.rephrases)
    preds = model.predict(prompts)
    return Fraction(sum(p == t for p, t in zip(preds, targets)), len(prompts))


def locality_fraction(
    model_after: Predictor,
    model_before: Predictor,
    cases: Sequence[EditEvalCase],
    cache: PredictionCache | None = None,
) -> Fraction:
    cases = _nonempty(cases)
    prompts = [p for c in cases for p, _ in c.locality_probes]
    if not prompts:
        raise ContractError("no locality probes")
    if cache is None:
        cache = PredictionCache.build(model_before, prompts)
    else:
        cache.check(model_before)
        missing = [p for p in prompts if p not in cache.predictions]
        if missing:
            raise StaleCacheError(f"{len(missing)} probes missing from the prediction cache")
    after = model_after.predict(prompts)
    return Fraction(sum(a == cache.predictions[p] for a, p in zip(after, prompts)), len(prompts))


def reliability(model: Predictor, cases: Sequence[EditEvalCase]) -> float:
    """Share of cases whose greedy continuation of the edit prompt is the target."""
    return float(reliability_fraction(model, cases))


def generalization(model: Predictor, cases: Sequence[EditEvalCase]) -> float:
    """Share of (case, rephrase) pairs answered with the target; pairs weigh equally."""
    return float(generalization_fraction(model, cases))


def locality(model_after: Predictor, model_before: Predictor, cases, cache: PredictionCache | None = None) -> float:
    """Share of out-of-scope probes whose prediction is unchanged from ``model_before``."""
    return float(locality_fraction(model_after, model_before, cases, cache))


def l1_deviation(W_now, W_base) -> tuple[float, float]:
    """Entrywise ``sum|W_now - W_base|`` and signed ``(|W_now|_1 - |W_base|_1) / |W_base|_1``."""
    a = np.asarray(W_now, dtype=np.float64)
    b = np.asarray(W_base, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    base = float(np.abs(b).sum())
    if base == 0.0:
        raise ValueError("base matrix has zero L1 norm")
    return float(np.abs(a - b).sum()), (float(np.abs(a).sum()) - base) / base


# logistic regression ------------------------------------------------------------


@dataclass
class LogRegResult:
    w: np.ndarray
    b: float
    loss_trace: list[float]
    grad_norm: float
    accuracy: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (_sigmoid(np.asarray(X) @ self.w + self.b) >= 0.5).astype(np.int64)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def fit_logreg(X, y, steps: int = 500, lr: float = 0.1) -> LogRegResult:
    """Full-batch gradient descent on mean logistic loss, weights and bias from zero.

    Features are standardized first so one learning rate suits any scale.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise ValueError("X must be (n, f) with n matching labels")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    w = np.zeros(Z.shape[1])
    b = 0.0
    trace = []
    gn = 0.0
    for _ in range(steps):
        t = Z @ w + b
        p = _sigmoid(t)
        # log(1 + e^t) - y t, written stably
        trace.append(float(np.mean(np.logaddexp(0.0, t) - y * t)))
        r = p - y
        gw = Z.T @ r / len(y)
        gb = float(r.mean())
        gn = float(np.sqrt(gw @ gw + gb * gb))
        w = w - lr * gw
        b = b - lr * gb
    w_raw = w / sd
    b_raw = b - float(w_raw @ mu)
    pred = (_sigmoid(Z @ w + b) >= 0.5).astype(np.float64)
    return LogRegResult(w_raw, b_raw, trace, gn, float(np.mean(pred == y)))


# fact drift ----------------------------------------------------------------------


@dataclass
class DriftReport:
    layer: int
    projections: np.ndarray
    labels: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    accuracy: float
    degenerate: bool
    fit: str = "pooled"
    format: str = DRIFT_FORMAT

    def to_dict(self) -> dict:
        return {
            "format": self.format,
            "layer": self.layer,
            "fit": self.fit,
            "accuracy": self.accuracy,
            "degenerate": self.degenerate,
            "explained_variance": self.explained_variance.tolist(),
            "components": self.components.tolist(),
            "labels": self.labels.tolist(),
            "projections": self.projections.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DriftReport":
        if d.get("format") != DRIFT_FORMAT:
            raise ValueError(f"unsupported drift report format {d.get('format')!r}")
        return cls(
            layer=int(d["layer"]),
            projections=np.array(d["projections"], dtype=np.float64).reshape(-1, 2),
            labels=np.array(d["labels"], dtype=np.int64),
            components=np.array(d["components"], dtype=np.float64),
            explained_variance=np.array(d["explained_variance"], dtype=np.float64),
            accuracy=float(d["accuracy"]),
            degenerate=bool(d["degenerate"]),
            fit=d.get("fit", "pooled"),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "DriftReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def collect_values(model: lm.MicroLM, prompts: Sequence[tuple[Sequence[int], int]], layer: int) -> np.ndarray:
    """MLP output vectors at ``(token ids, position)`` trace points."""
    out = np.empty((len(prompts), model.config.d_model))
    by_len: dict[int, list[int]] = {}
    for i, (ids, _) in enumerate(prompts):
        by_len.setdefault(len(ids), []).append(i)
    for _, idx in sorted(by_len.items()):
        batch = np.array([prompts[i][0] for i in idx], dtype=np.int64)
        pos = np.array([prompts[i][1] for i in idx], dtype=np.int64)
        if np.any(pos < 0) or np.any(pos >= batch.shape[1]):
            raise IndexError("trace position out of range")
        cap = lm.run(model, batch, capture=[layer]).captured[(layer, "mlp_value")]
        out[idx] = cap[np.arange(len(idx)), pos]
    return out


def drift_from_values(Va: np.ndarray, Vb: np.ndarray, layer: int = -1, fit: str = "pooled") -> DriftReport:
    """PCA of both value sets, then how well a line separates model a from model b."""
    if fit not in ("pooled", "a"):
        raise ValueError("fit must be 'pooled' or 'a'")
    rows = np.vstack([Va, Vb])
    labels = np.concatenate([np.zeros(len(Va), dtype=np.int64), np.ones(len(Vb), dtype=np.int64)])
    pca = ng.pca_2d(rows, fit_rows=Va if fit == "a" else None)
    if pca.degenerate:
        acc = 0.5
    else:
        lr = fit_logreg(pca.projections, labels)
        acc = max(lr.accuracy, 1.0 - lr.accuracy)
    return DriftReport(layer, pca.projections, labels, pca.components, pca.explained_variance, acc, pca.degenerate, fit)


def fact_drift_pca(
    model_a: lm.MicroLM,
    model_b: lm.MicroLM,
    prompts: Sequence[tuple[Sequence[int], int]],
    layer: int,
    fit: str = "pooled",
) -> DriftReport:
    """Separation accuracy in [0.5, 1] of the two models' value vectors in a shared 2-d PCA."""
    if len(prompts) < 10:
        raise ContractError("fact drift needs at least 10 prompts")
    return drift_from_values(collect_values(model_a, prompts, layer), collect_values(model_b, prompts, layer), layer, fit)
