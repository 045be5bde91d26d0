"""Synthetic candidate pools and cascade traces.

A pool is n candidates with d standardized features, a logistic-linear
ground-truth probability (optionally with one quadratic interaction), and
labels drawn once at creation. Running a cascade of scorers over the pool
produces nested selections S0 > S1 > ... > SN together with each stage's
logged predictions on its input set. Labels are *revealed* only for the
final set: the impression dataset carries them, the consideration dataset
(stage-1 survivors that never reached the end) carries only features and
the next stage's logged predictions, so downstream training code cannot
touch ground truth it would not have in production.

Datasets serialize to JSONL, one object per candidate:
  {"id": int, "features": [d floats], "label": 0/1 (impressions only),
   "teacher_pred": float (consideration only, when logged)}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .predictor import DifferentiablePredictor, sigmoid
from .rng import substream


@dataclass(frozen=True)
class PoolConfig:
    num_candidates: int
    num_features: int
    informative_weights: tuple[float, ...]
    bias: float
    feature_correlation: float = 0.0
    nonlinearity: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_candidates < 1:
            raise ConfigError("num_candidates must be >= 1")
        if self.num_features < 1:
            raise ConfigError("num_features must be >= 1")
        if len(self.informative_weights) != self.num_features:
            raise ConfigError("informative_weights must have one entry per feature")
        if not any(w != 0.0 for w in self.informative_weights):
            raise ConfigError("at least one informative weight must be nonzero")
        if not (0.0 <= self.feature_correlation < 1.0):
            raise ConfigError("feature_correlation must lie in [0, 1)")
        if self.nonlinearity and sum(w != 0.0 for w in self.informative_weights) < 2:
            raise ConfigError("the interaction term needs two informative features")

    @property
    def informative_indices(self) -> tuple[int, ...]:
        return tuple(i for i, w in enumerate(self.informative_weights) if w != 0.0)


# Interaction coefficient for the optional quadratic term (product of the
# first two informative features); fixed so the ground truth stays known.
INTERACTION_COEF = 0.5


@dataclass(frozen=True)
class CandidatePool:
    config: PoolConfig
    candidate_id: np.ndarray  # (n,) unique ints
    features: np.ndarray  # (n, d)
    true_prob: np.ndarray  # (n,) strictly inside (0, 1)
    label: np.ndarray  # (n,) ints in {0, 1}

    def true_logit(self, indices: np.ndarray | None = None) -> np.ndarray:
        p = self.true_prob if indices is None else self.true_prob[indices]
        return np.log(p) - np.log1p(-p)


def true_logits(config: PoolConfig, features: np.ndarray) -> np.ndarray:
    """Ground-truth logit for arbitrary feature rows under this config."""
    logit = features @ np.asarray(config.informative_weights) + config.bias
    if config.nonlinearity:
        i, j = config.informative_indices[:2]
        logit = logit + INTERACTION_COEF * features[:, i] * features[:, j]
    return logit


def generate_pool(config: PoolConfig) -> CandidatePool:
    """Equicorrelated standard-normal features, logistic truth, Bernoulli labels."""
    n, d = config.num_candidates, config.num_features
    gen = substream(config.seed, "pool")
    z = gen.standard_normal((n, d))
    rho = config.feature_correlation
    if rho > 0.0:
        common = gen.standard_normal((n, 1))
        z = np.sqrt(rho) * common + np.sqrt(1.0 - rho) * z
    prob = np.clip(sigmoid(true_logits(config, z)), 1e-12, 1.0 - 1e-12)
    labels = (substream(config.seed, "labels").random(n) < prob).astype(np.int64)
    return CandidatePool(
        config=config,
        candidate_id=np.arange(n, dtype=np.int64),
        features=z,
        true_prob=prob,
        label=labels,
    )


class Scorer(Protocol):
    def score(self, pool: CandidatePool, indices: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ModelScorer:
    """Scores pool rows with a trained predictor over a feature-column view."""

    model: DifferentiablePredictor
    feature_view: tuple[int, ...] | None = None

    def score(self, pool: CandidatePool, indices: np.ndarray) -> np.ndarray:
        x = pool.features[indices]
        if self.feature_view is not None:
            x = x[:, list(self.feature_view)]
        return self.model.predict_batch(x)


@dataclass(frozen=True)
class NoisyTruthScorer:
    """Production-model stand-in: true logit plus fixed per-candidate noise.

    The noise vector is drawn once per (seed, pool size), so a candidate's
    score does not depend on which subset it is scored in.
    """

    sigma: float
    seed: int
    stream: str = "oracle-noise"

    def score(self, pool: CandidatePool, indices: np.ndarray) -> np.ndarray:
        noise = substream(self.seed, self.stream).standard_normal(pool.config.num_candidates)
        return sigmoid(pool.true_logit(indices) + self.sigma * noise[indices])


@dataclass(frozen=True)
class LinearFeatureScorer:
    """Stand-in scorer using explicit feature weights (not the pool's truth)."""

    weights: tuple[float, ...]
    bias: float
    sigma: float
    seed: int
    stream: str = "feature-noise"

    def score(self, pool: CandidatePool, indices: np.ndarray) -> np.ndarray:
        w = np.asarray(self.weights)
        if w.shape[0] != pool.config.num_features:
            raise DimensionError("scorer weights must match the pool's feature count")
        noise = substream(self.seed, self.stream).standard_normal(pool.config.num_candidates)
        return sigmoid(pool.features[indices] @ w + self.bias + self.sigma * noise[indices])


ScorerLike = Scorer | DifferentiablePredictor | Callable[[np.ndarray], np.ndarray]


def _as_scorer(obj: ScorerLike) -> Scorer:
    if isinstance(obj, DifferentiablePredictor):
        return ModelScorer(obj)
    if hasattr(obj, "score"):
        return obj  # type: ignore[return-value]

    class _CallableScorer:
        def score(self, pool: CandidatePool, indices: np.ndarray) -> np.ndarray:
            return np.asarray(obj(pool.features[indices]), dtype=float)

    return _CallableScorer()


@dataclass(frozen=True)
class CascadeTrace:
    """Nested selections and per-stage logged predictions.

    ``stage_sets[j]`` holds the candidate indices surviving stage j
    (``stage_sets[0]`` is the full pool), each sorted ascending.
    ``stage_predictions[j]`` holds stage j+1's scores for every member of
    its input set ``stage_sets[j]``, aligned elementwise.
    """

    stage_sets: tuple[np.ndarray, ...]
    stage_predictions: tuple[np.ndarray, ...]
    impression_labels: np.ndarray

    @property
    def num_stages(self) -> int:
        return len(self.stage_predictions)

    @property
    def final_set(self) -> np.ndarray:
        return self.stage_sets[-1]


def run_cascade(
    pool: CandidatePool,
    stage_models: Sequence[ScorerLike],
    stage_sizes: Sequence[int],
) -> CascadeTrace:
    """Score, select top-k per stage (ties by candidate id), log everything."""
    if len(stage_models) != len(stage_sizes):
        raise ConfigError("one stage size per stage model is required")
    if len(stage_sizes) == 0:
        raise ConfigError("a cascade needs at least one stage")
    sizes = list(stage_sizes)
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise ConfigError(f"stage sizes must be strictly decreasing, got {sizes}")
    if sizes[0] > pool.config.num_candidates:
        raise ConfigError("first stage size exceeds the pool size")

    sets = [pool.candidate_id.copy()]
    preds = []
    for scorer, k in zip(stage_models, sizes):
        current = sets[-1]
        scores = np.asarray(_as_scorer(scorer).score(pool, current), dtype=float)
        if scores.shape != current.shape:
            raise DimensionError("scorer must return one score per input candidate")
        preds.append(scores)
        # Stable sort on negated scores keeps ascending candidate id on ties.
        order = np.argsort(-scores, kind="stable")[:k]
        sets.append(np.sort(current[order]))
    return CascadeTrace(
        stage_sets=tuple(sets),
        stage_predictions=tuple(preds),
        impression_labels=pool.label[sets[-1]],
    )


@dataclass(frozen=True)
class LabeledDataset:
    """Impression data: the only place real labels are visible."""

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class UnlabeledDataset:
    """Consideration data: features plus logged teacher predictions, no labels."""

    ids: np.ndarray
    features: np.ndarray
    teacher_pred: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def with_teacher_pred(self, preds: np.ndarray) -> "UnlabeledDataset":
        if preds.shape != self.ids.shape:
            raise DimensionError("one teacher prediction per example is required")
        return UnlabeledDataset(ids=self.ids, features=self.features, teacher_pred=preds)


def restrict_features(dataset, columns: Sequence[int]):
    """Same dataset with only the given feature columns (order preserved)."""
    cols = list(columns)
    sub = dataset.features[:, cols]
    if isinstance(dataset, LabeledDataset):
        return LabeledDataset(ids=dataset.ids, features=sub, labels=dataset.labels)
    return UnlabeledDataset(ids=dataset.ids, features=sub, teacher_pred=dataset.teacher_pred)


def make_splits(trace: CascadeTrace, pool: CandidatePool) -> tuple[LabeledDataset, UnlabeledDataset]:
    """Impression (final set, labeled) and consideration (S1 minus final) splits.

    Consideration rows carry the stage-2 model's logged predictions — the
    scores it produced while ranking S1 — which is exactly what a later
    stage makes available for free as pseudo-label targets.
    """
    final = trace.final_set
    impression = LabeledDataset(
        ids=final.copy(),
        features=pool.features[final],
        labels=pool.label[final].astype(float),
    )
    s1 = trace.stage_sets[1]
    keep = ~np.isin(s1, final, assume_unique=True)
    consid_ids = s1[keep]
    teacher = None
    if trace.num_stages >= 2:
        teacher = trace.stage_predictions[1][keep]
    consideration = UnlabeledDataset(
        ids=consid_ids,
        features=pool.features[consid_ids],
        teacher_pred=teacher,
    )
    return impression, consideration


# -- default experiment pool: large enough to show selection bias, small
#    enough to regenerate in well under a second --

DEFAULT_WEIGHTS = (1.0, -0.8, 0.6, -0.5, 0.4, 0.3, -0.25, 0.2) + (0.0,) * 12
DEFAULT_CASCADE_SIZES = (5_000, 500)


def default_pool_config(seed: int, num_candidates: int = 100_000) -> PoolConfig:
    return PoolConfig(
        num_candidates=num_candidates,
        num_features=20,
        informative_weights=DEFAULT_WEIGHTS,
        bias=-1.0,
        feature_correlation=0.0,
        nonlinearity=False,
        seed=seed,
    )


# -- JSONL serialization --


def dataset_to_jsonl(dataset: LabeledDataset | UnlabeledDataset) -> str:
    lines = []
    labeled = isinstance(dataset, LabeledDataset)
    for row in range(len(dataset)):
        obj: dict = {
            "id": int(dataset.ids[row]),
            "features": [float(v) for v in dataset.features[row]],
        }
        if labeled:
            obj["label"] = int(dataset.labels[row])
        elif dataset.teacher_pred is not None:
            obj["teacher_pred"] = float(dataset.teacher_pred[row])
        lines.append(json.dumps(obj, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def dataset_from_jsonl(text: str) -> LabeledDataset | UnlabeledDataset:
    ids, feats, labels, teacher = [], [], [], []
    labeled = None
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        ids.append(obj["id"])
        feats.append(obj["features"])
        if labeled is None:
            labeled = "label" in obj
        if labeled:
            labels.append(obj["label"])
        elif "teacher_pred" in obj:
            teacher.append(obj["teacher_pred"])
    id_arr = np.asarray(ids, dtype=np.int64)
    feat_arr = np.asarray(feats, dtype=float)
    if labeled:
        return LabeledDataset(ids=id_arr, features=feat_arr, labels=np.asarray(labels, dtype=float))
    return UnlabeledDataset(
        ids=id_arr,
        features=feat_arr,
        teacher_pred=np.asarray(teacher, dtype=float) if len(teacher) == len(ids) else None,
    )
