"""Semi-supervised feature selection.

Feature importance measured on impression data inherits its selection
bias: a feature the later stages squeeze into a narrow band looks
unimportant there no matter how predictive it is on the broader serving
distribution. The remedy ranks features twice — once the regular way on
impression data, once on a teacher-pseudo-labeled mixed dataset that
covers consideration traffic — and combines the two rankings.

Importance itself is perturbation-based: per batch and per feature,
measure the BCE against the batch's targets, shuffle that feature's
column within the batch, measure again, and report the mean and standard
deviation of the loss increase across batches.

``ssfs_pipeline`` runs the whole exercise end to end:

  1. train a teacher on (pooled) impression data;
  2. pseudo-label the consideration data with it;
  3. train a simplified all-features model on the mixed 80% train split;
  4. compute importance per regime on the withheld 20% splits
     (impression-only model on the impression split for the biased
     ranking, mixed model on the mixed split for the unbiased one);
  5. combine the rankings per strategy, retrain a student restricted to
     the selected features on the mixed train split, and report NE
     changes on both holdout regimes against the impression-only
     selection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .metrics import normalized_entropy, relative_change
from .predictor import (
    DifferentiablePredictor,
    PredictorArch,
    TrainConfig,
    bce_mean,
    train,
)
from .distill import DistillConfig, distill_train, make_pseudo_labels, render_comparison_table
from .rng import derive_seed, substream
from .synthgen import (
    LabeledDataset,
    LinearFeatureScorer,
    NoisyTruthScorer,
    PoolConfig,
    UnlabeledDataset,
    generate_pool,
    make_splits,
    restrict_features,
    run_cascade,
)
from . import distill as _distill


@dataclass(frozen=True)
class FeatureImportanceRecord:
    feature_index: int
    mean_importance: float
    std_importance: float
    batches: int


@dataclass(frozen=True)
class FeatureImportanceReport:
    records: tuple[FeatureImportanceRecord, ...]
    regime: str  # "impression" | "consideration_mixed"

    @property
    def num_features(self) -> int:
        return len(self.records)

    def means(self) -> np.ndarray:
        return np.array([r.mean_importance for r in self.records])

    def ranking(self) -> list[int]:
        """Feature indices from most to least important, ties by index."""
        m = self.means()
        return sorted(range(len(m)), key=lambda i: (-m[i], i))

    def top(self, top_n: int) -> set[int]:
        return set(self.ranking()[:top_n])

    def to_csv(self) -> str:
        lines = ["feature_index,mean_importance,std_importance,batches,regime"]
        for r in self.records:
            lines.append(
                f"{r.feature_index},{r.mean_importance:.6g},{r.std_importance:.6g},"
                f"{r.batches},{self.regime}"
            )
        return "\n".join(lines) + "\n"


COMBINATION_STRATEGIES = (
    "imp_only",
    "cd_only",
    "average_rank",
    "average_importance",
    "intersection_top",
    "union_top",
)


def _targets_of(dataset) -> np.ndarray:
    if isinstance(dataset, LabeledDataset):
        return dataset.labels
    if dataset.teacher_pred is None:
        raise ConfigError("unlabeled dataset has no pseudo-labels to score against")
    return dataset.teacher_pred


def perturb_importance(
    model: DifferentiablePredictor,
    dataset,
    num_batches: int,
    batch_size: int,
    seed: int,
) -> FeatureImportanceReport:
    """Within-batch column-shuffle loss increase, averaged over batches.

    Batches are sampled independently (without replacement inside a
    batch) from the dataset; each (batch, feature) pair gets its own
    permutation substream.
    """
    features = dataset.features
    targets = _targets_of(dataset)
    n, d = features.shape
    if n == 0:
        raise ConfigError("cannot measure importance on an empty dataset")
    if model.arch.input_dim != d:
        raise DimensionError(f"model expects {model.arch.input_dim} features, dataset has {d}")
    if num_batches < 1:
        raise ConfigError("num_batches must be >= 1")
    size = min(batch_size, n)

    deltas = np.empty((num_batches, d))
    for b in range(num_batches):
        idx = substream(seed, "batch", b).choice(n, size=size, replace=False)
        x = features[idx]
        y = targets[idx]
        base = bce_mean(y, model.predict_batch(x))
        for f in range(d):
            perm = substream(seed, "perm", b, f).permutation(size)
            shuffled = x.copy()
            shuffled[:, f] = x[perm, f]
            deltas[b, f] = bce_mean(y, model.predict_batch(shuffled)) - base

    records = tuple(
        FeatureImportanceRecord(
            feature_index=f,
            mean_importance=float(deltas[:, f].mean()),
            std_importance=float(deltas[:, f].std(ddof=1)) if num_batches > 1 else 0.0,
            batches=num_batches,
        )
        for f in range(d)
    )
    regime = "impression" if isinstance(dataset, LabeledDataset) else "consideration_mixed"
    return FeatureImportanceReport(records=records, regime=regime)


def _rank_positions(report: FeatureImportanceReport) -> np.ndarray:
    pos = np.empty(report.num_features)
    for rank, feat in enumerate(report.ranking()):
        pos[feat] = rank
    return pos


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def combine_rankings(
    imp_report: FeatureImportanceReport,
    cd_report: FeatureImportanceReport,
    strategy: str,
    top_n: int,
) -> set[int]:
    """Feature set selected by one of the six combination strategies."""
    if strategy not in COMBINATION_STRATEGIES:
        raise ConfigError(f"strategy must be one of {COMBINATION_STRATEGIES}, got {strategy!r}")
    if imp_report.num_features != cd_report.num_features:
        raise ConfigError("importance reports cover different feature universes")
    d = imp_report.num_features
    if not (1 <= top_n <= d):
        raise ConfigError(f"top_n must be in [1, {d}], got {top_n}")

    if strategy == "imp_only":
        return imp_report.top(top_n)
    if strategy == "cd_only":
        return cd_report.top(top_n)
    if strategy == "intersection_top":
        return imp_report.top(top_n) & cd_report.top(top_n)
    if strategy == "union_top":
        return imp_report.top(top_n) | cd_report.top(top_n)
    if strategy == "average_rank":
        score = (_rank_positions(imp_report) + _rank_positions(cd_report)) / 2.0
        order = sorted(range(d), key=lambda i: (score[i], i))
        return set(order[:top_n])
    # average_importance: min-max normalize each report before averaging
    score = (_minmax(imp_report.means()) + _minmax(cd_report.means())) / 2.0
    order = sorted(range(d), key=lambda i: (-score[i], i))
    return set(order[:top_n])


@dataclass(frozen=True)
class SSFSStrategyRow:
    strategy: str
    selected_features: tuple[int, ...]
    impression_ne: float
    consideration_ne: float
    impression_ne_change_pct: float
    consideration_ne_change_pct: float


@dataclass(frozen=True)
class SSFSResult:
    imp_report: FeatureImportanceReport
    cd_report: FeatureImportanceReport
    rows: tuple[SSFSStrategyRow, ...]
    top_n: int

    def row(self, strategy: str) -> SSFSStrategyRow:
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise KeyError(strategy)

    def render_text(self) -> str:
        labels = {
            "imp_only": "IMP Importance Only",
            "cd_only": "CD Importance Only",
            "average_rank": "Average Rank",
            "average_importance": "Average Importance",
            "intersection_top": "Intersection of Top Features",
            "union_top": "Union of Top Features",
        }
        rows = [
            (
                labels[r.strategy],
                f"{r.impression_ne_change_pct:+.3f}%",
                f"{r.consideration_ne_change_pct:+.3f}%",
            )
            for r in self.rows
        ]
        return render_comparison_table(
            ("Method", "Impression NE chg", "Consideration NE chg"), rows
        )

    def to_json(self, provenance: dict | None = None) -> str:
        payload = {
            "top_n": self.top_n,
            "rows": [
                {
                    "strategy": r.strategy,
                    "selected_features": list(r.selected_features),
                    "impression_ne": r.impression_ne,
                    "consideration_ne": r.consideration_ne,
                    "impression_ne_change_pct": r.impression_ne_change_pct,
                    "consideration_ne_change_pct": r.consideration_ne_change_pct,
                }
                for r in self.rows
            ],
        }
        if provenance is not None:
            payload["provenance"] = provenance
        return json.dumps(payload, sort_keys=True, indent=2)


@dataclass(frozen=True)
class SSFSConfig:
    """Planted-feature scenario plus the pipeline's training knobs.

    The pool has ``num_regular`` ordinary informative features and one
    planted feature. The stage-1 production scorer ignores the planted
    feature entirely (early models consume fewer features); the stage-2
    scorer over-relies on it, so impressions end up with the planted
    feature squeezed into a narrow band while consideration data keeps
    its spread.
    """

    seed: int
    pool_candidates: int = 50_000
    num_features: int = 20
    regular_weights: tuple[float, ...] = (1.0, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6)
    planted_index: int = 8
    planted_weight: float = 0.8
    planted_stage2_boost: float = 4.0
    bias: float = -5.0
    cascade_sizes: tuple[int, ...] = (5_000, 500)
    stage1_noise: float = 0.7
    stage2_noise: float = 0.4
    days: int = 24
    top_n: int = 8
    num_batches: int = 60
    fi_batch_size: int = 256
    holdout_fraction: float = 0.2
    teacher_hidden: tuple[int, ...] = ()
    student_hidden: tuple[int, ...] = (16,)
    epochs: int = 150
    learning_rate: float = 0.3
    batch_size: int = 256
    l2: float = 1e-4

    def pool_config(self, day: int) -> PoolConfig:
        weights = [0.0] * self.num_features
        for i, w in enumerate(self.regular_weights):
            weights[i] = w
        weights[self.planted_index] = self.planted_weight
        return PoolConfig(
            num_candidates=self.pool_candidates,
            num_features=self.num_features,
            informative_weights=tuple(weights),
            bias=self.bias,
            seed=derive_seed(self.seed, "pool", day),
        )

    @property
    def informative_indices(self) -> tuple[int, ...]:
        return tuple(range(len(self.regular_weights))) + (self.planted_index,)

    def scorers(self) -> tuple[LinearFeatureScorer, LinearFeatureScorer]:
        base = list(self.pool_config(0).informative_weights)
        w1 = list(base)
        w1[self.planted_index] = 0.0  # early stage never sees the planted feature
        w2 = list(base)
        w2[self.planted_index] += self.planted_stage2_boost
        return (
            LinearFeatureScorer(tuple(w1), self.bias, self.stage1_noise,
                                derive_seed(self.seed, "prod-stage1")),
            LinearFeatureScorer(tuple(w2), self.bias, self.stage2_noise,
                                derive_seed(self.seed, "prod-stage2")),
        )

    def train_config(self, name: str) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            l2=self.l2,
            seed=derive_seed(self.seed, "train", name),
        )


def _split_80_20(dataset, seed: int):
    n = len(dataset)
    perm = substream(seed, "holdout").permutation(n)
    cut = max(1, int(round(n * 0.8)))
    tr, ho = perm[:cut], perm[cut:]

    def take(idx):
        if isinstance(dataset, LabeledDataset):
            return LabeledDataset(dataset.ids[idx], dataset.features[idx], dataset.labels[idx])
        tp = None if dataset.teacher_pred is None else dataset.teacher_pred[idx]
        return UnlabeledDataset(dataset.ids[idx], dataset.features[idx], tp)

    return take(tr), take(ho)


@dataclass(frozen=True)
class MixedSet:
    """Impression rows (label targets) pooled with pseudo-labeled rows."""

    impression: LabeledDataset
    consideration: UnlabeledDataset

    @property
    def features(self) -> np.ndarray:
        return np.vstack([self.impression.features, self.consideration.features])

    @property
    def targets(self) -> np.ndarray:
        return np.concatenate([self.impression.labels, self.consideration.teacher_pred])

    def restrict(self, columns) -> "MixedSet":
        return MixedSet(
            impression=restrict_features(self.impression, columns),
            consideration=restrict_features(self.consideration, columns),
        )

    def __len__(self) -> int:
        return len(self.impression) + len(self.consideration)


class _MixedForImportance:
    """Adapter so perturb_importance sees one (features, targets) surface."""

    def __init__(self, mixed: MixedSet) -> None:
        self.features = mixed.features
        self._targets = mixed.targets

    @property
    def teacher_pred(self) -> np.ndarray:
        return self._targets


def ssfs_pipeline(cfg: SSFSConfig, strategies: tuple[str, ...] = COMBINATION_STRATEGIES) -> SSFSResult:
    stage1, stage2 = cfg.scorers()
    imps, cons = [], []
    for day in range(cfg.days):
        pool = generate_pool(cfg.pool_config(day))
        imp, con = make_splits(run_cascade(pool, [stage1, stage2], cfg.cascade_sizes), pool)
        imps.append(imp)
        cons.append(con)
    impression = _distill.concat_labeled(imps)
    consideration = _distill.concat_unlabeled(cons)

    # 1-2. teacher on impressions; pseudo-labels for consideration rows.
    d = cfg.num_features
    teacher_arch = (
        PredictorArch("linear", d)
        if not cfg.teacher_hidden
        else PredictorArch("feedforward", d, cfg.teacher_hidden)
    )
    teacher_init = DifferentiablePredictor.initialize(teacher_arch, derive_seed(cfg.seed, "teacher-init"))
    teacher, _ = train(teacher_init, impression.features, impression.labels, cfg.train_config("teacher"))
    consideration = make_pseudo_labels(teacher, consideration)

    imp_train, imp_hold = _split_80_20(impression, derive_seed(cfg.seed, "split-imp"))
    con_train, con_hold = _split_80_20(consideration, derive_seed(cfg.seed, "split-con"))
    mixed_train = MixedSet(imp_train, con_train)
    mixed_hold = MixedSet(imp_hold, con_hold)

    # 3. simplified all-feature models per regime (one hidden layer, half width).
    half = max(1, (cfg.student_hidden[0] if cfg.student_hidden else 2) // 2)
    simple_arch = PredictorArch("feedforward", d, (half,))
    simple_init = DifferentiablePredictor.initialize(simple_arch, derive_seed(cfg.seed, "simple-init"))
    imp_model, _ = train(simple_init, imp_train.features, imp_train.labels, cfg.train_config("fi-imp"))
    mix_model, _ = train(simple_init, mixed_train.features, mixed_train.targets, cfg.train_config("fi-mix"))

    # 4. perturbation importance on the withheld split of each regime.
    imp_report = perturb_importance(
        imp_model, imp_hold, cfg.num_batches, cfg.fi_batch_size, derive_seed(cfg.seed, "fi-imp")
    )
    cd_report = perturb_importance(
        mix_model,
        _MixedForImportance(mixed_hold),
        cfg.num_batches,
        cfg.fi_batch_size,
        derive_seed(cfg.seed, "fi-mix"),
    )

    # 5. per strategy: select, retrain restricted student, score both holdouts.
    student_arch_for = lambda width: (
        PredictorArch("feedforward", width, cfg.student_hidden)
        if cfg.student_hidden
        else PredictorArch("linear", width)
    )

    def evaluate(selected: tuple[int, ...]) -> tuple[float, float]:
        cols = list(selected)
        arch = student_arch_for(len(cols))
        init = DifferentiablePredictor.initialize(arch, derive_seed(cfg.seed, "student-init"))
        sub_train = mixed_train.restrict(cols)
        model, _ = distill_train(
            init,
            sub_train.impression,
            sub_train.consideration,
            DistillConfig(1.0, 0.5, 2, 1, cfg.train_config("student")),
        )
        imp_ne = normalized_entropy(
            imp_hold.labels, model.predict_batch(imp_hold.features[:, cols]), "ground_truth"
        ).ne
        con_ne = normalized_entropy(
            con_hold.teacher_pred,
            model.predict_batch(con_hold.features[:, cols]),
            "teacher_prediction",
        ).ne
        return imp_ne, con_ne

    cache: dict[tuple[int, ...], tuple[float, float]] = {}

    def evaluate_cached(selected: set[int]) -> tuple[tuple[int, ...], float, float]:
        key = tuple(sorted(selected))
        if key not in cache:
            cache[key] = evaluate(key)
        return key, *cache[key]

    if "imp_only" not in strategies:
        strategies = ("imp_only",) + tuple(strategies)
    _, base_imp_ne, base_con_ne = evaluate_cached(
        combine_rankings(imp_report, cd_report, "imp_only", cfg.top_n)
    )

    rows = []
    for strategy in strategies:
        selected = combine_rankings(imp_report, cd_report, strategy, cfg.top_n)
        if not selected:  # intersection can be empty; nothing to train on
            rows.append(
                SSFSStrategyRow(strategy, (), float("nan"), float("nan"), float("nan"), float("nan"))
            )
            continue
        key, imp_ne, con_ne = evaluate_cached(selected)
        rows.append(
            SSFSStrategyRow(
                strategy=strategy,
                selected_features=key,
                impression_ne=imp_ne,
                consideration_ne=con_ne,
                impression_ne_change_pct=relative_change(imp_ne, base_imp_ne),
                consideration_ne_change_pct=relative_change(con_ne, base_con_ne),
            )
        )
    return SSFSResult(imp_report=imp_report, cd_report=cd_report, rows=tuple(rows), top_n=cfg.top_n)


def oracle_importance_model(config: PoolConfig) -> DifferentiablePredictor:
    """The ground-truth logistic model as a predictor (for oracle checks)."""
    if config.nonlinearity:
        raise ConfigError("the oracle predictor covers the linear ground truth only")
    arch = PredictorArch("linear", config.num_features)
    model = DifferentiablePredictor.initialize(arch, 0)
    flat = np.concatenate([np.asarray(config.informative_weights, dtype=float), [config.bias]])
    return model.with_flat(flat)
