"""Cross-stage knowledge distillation on labeled and unlabeled data.

A later-stage model teaches an earlier-stage student: the student trains
on real labels for impression data and on the teacher's logged
predictions, used as soft BCE targets, for consideration data. The
consideration side is where it matters — that is the student's actual
serving distribution, on which a purely impression-trained student is
over-calibrated on the candidates it promotes itself.

``run_distill_experiment`` stages the whole desk-scale exercise:

  1. Generate a training pool; run the incumbent production cascade
     (noisy-oracle stand-ins with stage-1 noisier than stage-2) and split
     its trace into impression and consideration data.
  2. Train the baseline student on impressions only, and the distilled
     student on impressions plus teacher-targeted consideration data.
  3. Generate a fresh evaluation pool and log an evaluation trace whose
     first stage is the *baseline student itself* (the incumbent whose
     traffic an offline comparison would use), second stage the
     production teacher.
  4. Score both students on the shared evaluation splits: calibration
     against the teacher per regime, NE against labels on impressions and
     against teacher predictions on consideration data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DimensionError
from .metrics import CalibrationReport, NEReport, calibration_ratio, normalized_entropy, relative_change
from .predictor import (
    DifferentiablePredictor,
    PredictorArch,
    TrainConfig,
    backward_from_logit,
    bce_mean,
    forward_cache,
    grad_logit_bce,
    train,
    _Optimizer,
    _l2_apply,
)
from .rng import derive_seed, substream
from .synthgen import (
    LabeledDataset,
    ModelScorer,
    NoisyTruthScorer,
    PoolConfig,
    UnlabeledDataset,
    default_pool_config,
    generate_pool,
    make_splits,
    run_cascade,
    DEFAULT_CASCADE_SIZES,
)


@dataclass(frozen=True)
class DistillConfig:
    distill_weight: float  # weight of the pseudo-label loss term
    unlabeled_batch_mix: float  # fraction of each batch drawn from consideration data
    teacher_stage: int
    student_stage: int
    train: TrainConfig

    def __post_init__(self) -> None:
        if self.distill_weight < 0:
            raise ConfigError("distill_weight must be >= 0")
        if not (0.0 <= self.unlabeled_batch_mix <= 1.0):
            raise ConfigError("unlabeled_batch_mix must lie in [0, 1]")
        if self.teacher_stage <= self.student_stage:
            raise ConfigError(
                f"teacher stage {self.teacher_stage} must come after student stage "
                f"{self.student_stage}"
            )


def make_pseudo_labels(
    teacher: DifferentiablePredictor, consideration: UnlabeledDataset
) -> UnlabeledDataset:
    """Attach the teacher's predictions as soft targets (pure, idempotent)."""
    if teacher.arch.input_dim != consideration.features.shape[1]:
        raise DimensionError(
            f"teacher expects {teacher.arch.input_dim} features, "
            f"dataset has {consideration.features.shape[1]}"
        )
    return consideration.with_teacher_pred(teacher.predict_batch(consideration.features))


def distill_train(
    student: DifferentiablePredictor,
    impression: LabeledDataset,
    consideration: UnlabeledDataset,
    config: DistillConfig,
) -> tuple[DifferentiablePredictor, list[float]]:
    """Train on mixed batches: supervised BCE plus weighted teacher-target BCE.

    With a zero distill weight or zero mix the schedule reduces to plain
    supervised training and reproduces its parameter trajectory exactly.
    History entries are the combined objective over the full datasets.
    """
    lam = config.distill_weight
    mix = config.unlabeled_batch_mix
    if len(consideration) == 0 and lam > 0.0 and mix > 0.0:
        raise ConfigError(
            "consideration data may be empty only when distill_weight or mix is 0"
        )
    if lam == 0.0 or mix == 0.0 or len(consideration) == 0:
        return train(student, impression.features, impression.labels, config.train)
    if consideration.teacher_pred is None:
        raise ConfigError("consideration data carries no teacher predictions")
    if impression.features.shape[1] != consideration.features.shape[1]:
        raise DimensionError("impression and consideration feature widths differ")

    tc = config.train
    n_unlab_per_batch = max(1, round(mix * tc.batch_size))
    n_lab_per_batch = tc.batch_size - n_unlab_per_batch
    if n_lab_per_batch == 0 and len(impression) > 0 and mix < 1.0:
        n_lab_per_batch = 1

    x_lab, y_lab = impression.features, impression.labels
    x_unlab, y_unlab = consideration.features, consideration.teacher_pred
    arch = student.arch
    layers = [(w.copy(), b.copy()) for w, b in student.layers]
    opt = _Optimizer(tc, layers)

    def full_loss(ls) -> float:
        sup = bce_mean(y_lab, forward_cache(ls, arch.activation, x_lab).z)
        dis = bce_mean(y_unlab, forward_cache(ls, arch.activation, x_unlab).z)
        return sup + lam * dis

    steps_per_epoch = (
        -(-len(impression) // n_lab_per_batch)
        if n_lab_per_batch > 0
        else -(-len(consideration) // n_unlab_per_batch)
    )
    history = [full_loss(layers)]
    for epoch in range(tc.epochs):
        perm_lab = substream(tc.seed, "shuffle", epoch).permutation(len(impression))
        perm_unlab = substream(tc.seed, "shuffle-unlabeled", epoch).permutation(len(consideration))
        u_at = 0
        for step in range(steps_per_epoch):
            grads = None
            if n_lab_per_batch > 0:
                idx = perm_lab[step * n_lab_per_batch : (step + 1) * n_lab_per_batch]
                if len(idx):
                    cache = forward_cache(layers, arch.activation, x_lab[idx])
                    g = grad_logit_bce(cache, y_lab[idx], None, 1.0 / len(idx))
                    grads, _ = backward_from_logit(layers, arch.activation, cache, g)
            take = []
            for _ in range(n_unlab_per_batch):
                take.append(perm_unlab[u_at])
                u_at = (u_at + 1) % len(perm_unlab)
            uidx = np.asarray(take)
            cache_u = forward_cache(layers, arch.activation, x_unlab[uidx])
            g_u = grad_logit_bce(cache_u, y_unlab[uidx], None, lam / len(uidx))
            grads_u, _ = backward_from_logit(layers, arch.activation, cache_u, g_u)
            if grads is None:
                grads = grads_u
            else:
                grads = [(gw + uw, gb + ub) for (gw, gb), (uw, ub) in zip(grads, grads_u)]
            _l2_apply(grads, layers, tc.l2)
            layers = opt.step(layers, grads)
        loss = full_loss(layers)
        history.append(loss)
    return (
        DifferentiablePredictor(arch=arch, layers=layers, init_seed=student.init_seed),
        history,
    )


@dataclass(frozen=True)
class CrossStageEvaluation:
    """Two data regimes x two metrics, baseline vs distilled candidate.

    Calibrations are student-vs-teacher ratios; the impression regime also
    reports student-vs-label ratios separately so cross-stage consistency
    is never conflated with unbiasedness against ground truth.
    """

    impression_calibration: CalibrationReport
    consideration_calibration: CalibrationReport
    impression_ne_change: float
    consideration_ne_change: float
    baseline_impression_calibration: CalibrationReport
    baseline_consideration_calibration: CalibrationReport
    impression_calibration_vs_labels: CalibrationReport
    baseline_impression_calibration_vs_labels: CalibrationReport
    impression_ne: NEReport
    consideration_ne: NEReport
    baseline_impression_ne: NEReport
    baseline_consideration_ne: NEReport
    baseline_id: str
    candidate_id: str

    def to_json(self, provenance: dict | None = None) -> str:
        def cal(c: CalibrationReport) -> dict:
            return {"calibration_ratio": c.ratio, "reference_kind": c.reference_kind}

        payload = {
            "baseline_id": self.baseline_id,
            "candidate_id": self.candidate_id,
            "impression": {
                "calibration_vs_teacher": {
                    "baseline": cal(self.baseline_impression_calibration),
                    "distilled": cal(self.impression_calibration),
                },
                "calibration_vs_labels": {
                    "baseline": cal(self.baseline_impression_calibration_vs_labels),
                    "distilled": cal(self.impression_calibration_vs_labels),
                },
                "ne": {
                    "baseline": self.baseline_impression_ne.ne,
                    "distilled": self.impression_ne.ne,
                    "relative_change_pct": self.impression_ne_change,
                },
                "n": self.impression_ne.num_examples,
            },
            "consideration": {
                "calibration_vs_teacher": {
                    "baseline": cal(self.baseline_consideration_calibration),
                    "distilled": cal(self.consideration_calibration),
                },
                "ne_vs_teacher": {
                    "baseline": self.baseline_consideration_ne.ne,
                    "distilled": self.consideration_ne.ne,
                    "relative_change_pct": self.consideration_ne_change,
                },
                "n": self.consideration_ne.num_examples,
            },
        }
        if provenance is not None:
            payload["provenance"] = provenance
        return json.dumps(payload, sort_keys=True, indent=2)

    def render_text(self) -> str:
        rows = [
            ("Model calibration (vs teacher)", "", ""),
            (
                "  Impression data",
                f"{self.baseline_impression_calibration.ratio:.2f}",
                f"{self.impression_calibration.ratio:.2f}",
            ),
            (
                "  Consideration data",
                f"{self.baseline_consideration_calibration.ratio:.2f}",
                f"{self.consideration_calibration.ratio:.2f}",
            ),
            ("NE relative change (lower is better)", "", ""),
            ("  Impression data", "0%", f"{self.impression_ne_change:+.2f}%"),
            ("  Consideration data", "0%", f"{self.consideration_ne_change:+.2f}%"),
        ]
        return render_comparison_table(("Data", "Baseline", "w/ Distillation"), rows)


def render_comparison_table(header: tuple[str, ...], rows: list[tuple[str, ...]]) -> str:
    widths = [
        max(len(header[c]), *(len(r[c]) for r in rows)) for c in range(len(header))
    ]
    def fmt(cells: tuple[str, ...]) -> str:
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    sep = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([fmt(header), sep, *(fmt(r) for r in rows)]) + "\n"


def evaluate_cross_stage(
    student_baseline: DifferentiablePredictor,
    student_distilled: DifferentiablePredictor,
    impression: LabeledDataset,
    consideration: UnlabeledDataset,
    baseline_id: str = "baseline",
    candidate_id: str = "distilled",
    impression_teacher_pred: np.ndarray | None = None,
) -> CrossStageEvaluation:
    """Score both students on one shared pair of evaluation datasets.

    ``consideration.teacher_pred`` supplies both the calibration reference
    and the NE targets on consideration data; ``impression_teacher_pred``
    supplies the calibration reference on impressions.
    """
    if consideration.teacher_pred is None:
        raise ConfigError("consideration evaluation data carries no teacher predictions")
    if impression_teacher_pred is None:
        raise ConfigError("impression teacher predictions are required for calibration")

    base_imp = student_baseline.predict_batch(impression.features)
    dist_imp = student_distilled.predict_batch(impression.features)
    base_con = student_baseline.predict_batch(consideration.features)
    dist_con = student_distilled.predict_batch(consideration.features)
    t_con = consideration.teacher_pred

    base_imp_ne = normalized_entropy(impression.labels, base_imp, "ground_truth")
    dist_imp_ne = normalized_entropy(impression.labels, dist_imp, "ground_truth")
    base_con_ne = normalized_entropy(t_con, base_con, "teacher_prediction")
    dist_con_ne = normalized_entropy(t_con, dist_con, "teacher_prediction")

    return CrossStageEvaluation(
        impression_calibration=calibration_ratio(dist_imp, impression_teacher_pred),
        consideration_calibration=calibration_ratio(dist_con, t_con),
        impression_ne_change=relative_change(dist_imp_ne.ne, base_imp_ne.ne),
        consideration_ne_change=relative_change(dist_con_ne.ne, base_con_ne.ne),
        baseline_impression_calibration=calibration_ratio(base_imp, impression_teacher_pred),
        baseline_consideration_calibration=calibration_ratio(base_con, t_con),
        impression_calibration_vs_labels=calibration_ratio(
            dist_imp, impression.labels, "ground_truth"
        ),
        baseline_impression_calibration_vs_labels=calibration_ratio(
            base_imp, impression.labels, "ground_truth"
        ),
        impression_ne=dist_imp_ne.vs_baseline(base_imp_ne),
        consideration_ne=dist_con_ne.vs_baseline(base_con_ne),
        baseline_impression_ne=base_imp_ne,
        baseline_consideration_ne=base_con_ne,
        baseline_id=baseline_id,
        candidate_id=candidate_id,
    )


@dataclass(frozen=True)
class DistillExperimentConfig:
    """Desk-scale cross-stage distillation exercise.

    ``train_days`` / ``eval_days`` are how many refreshed candidate pools
    the default cascade is run over to accumulate training impressions and
    evaluation traffic; industrial baselines see many days of logs, and a
    single day's 500 impressions would leave the baseline so far from
    saturation that distillation would visibly improve impression NE too.
    Stage noises are the production stand-ins' logit-error levels, stage 1
    noisier than stage 2.
    """

    seed: int
    pool_candidates: int = 100_000
    cascade_sizes: tuple[int, ...] = DEFAULT_CASCADE_SIZES
    train_days: int = 44
    eval_days: int = 24
    stage1_noise: float = 2.0
    stage2_noise: float = 0.5
    distill_weight: float = 1.0
    unlabeled_batch_mix: float = 0.5
    epochs: int = 300
    learning_rate: float = 0.15
    batch_size: int = 256
    l2: float = 5e-4

    def pool_config(self, which: str, day: int) -> PoolConfig:
        return default_pool_config(
            derive_seed(self.seed, "pool", which, day), self.pool_candidates
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer="sgd",
            l2=self.l2,
            seed=derive_seed(self.seed, "student-train"),
        )

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            distill_weight=self.distill_weight,
            unlabeled_batch_mix=self.unlabeled_batch_mix,
            teacher_stage=2,
            student_stage=1,
            train=self.train_config(),
        )


@dataclass(frozen=True)
class DistillExperimentResult:
    evaluation: CrossStageEvaluation
    baseline: DifferentiablePredictor
    distilled: DifferentiablePredictor
    train_impression_size: int
    train_consideration_size: int


def production_scorers(cfg: DistillExperimentConfig) -> tuple[NoisyTruthScorer, NoisyTruthScorer]:
    return (
        NoisyTruthScorer(cfg.stage1_noise, derive_seed(cfg.seed, "prod-stage1")),
        NoisyTruthScorer(cfg.stage2_noise, derive_seed(cfg.seed, "prod-stage2")),
    )


def concat_labeled(parts: list[LabeledDataset]) -> LabeledDataset:
    return LabeledDataset(
        ids=np.concatenate([p.ids for p in parts]),
        features=np.vstack([p.features for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
    )


def concat_unlabeled(parts: list[UnlabeledDataset]) -> UnlabeledDataset:
    preds = [p.teacher_pred for p in parts]
    return UnlabeledDataset(
        ids=np.concatenate([p.ids for p in parts]),
        features=np.vstack([p.features for p in parts]),
        teacher_pred=None if any(t is None for t in preds) else np.concatenate(preds),
    )


def _accumulate_traffic(
    cfg: DistillExperimentConfig, which: str, days: int, stage1, stage2
) -> tuple[LabeledDataset, UnlabeledDataset, np.ndarray]:
    """Run the cascade over ``days`` refreshed pools; pool the splits.

    Also returns the stage-2 model's logged scores for the impressions
    (recorded while it ranked S1), the calibration reference there.
    """
    imps, cons, teach = [], [], []
    for day in range(days):
        pool = generate_pool(cfg.pool_config(which, day))
        trace = run_cascade(pool, [stage1, stage2], cfg.cascade_sizes)
        imp, con = make_splits(trace, pool)
        in_final = np.isin(trace.stage_sets[1], trace.final_set, assume_unique=True)
        teach.append(trace.stage_predictions[1][in_final])
        imps.append(imp)
        cons.append(con)
    return concat_labeled(imps), concat_unlabeled(cons), np.concatenate(teach)


def run_distill_experiment(cfg: DistillExperimentConfig) -> DistillExperimentResult:
    stage1, stage2 = production_scorers(cfg)

    impression, consideration, _ = _accumulate_traffic(
        cfg, "train", cfg.train_days, stage1, stage2
    )

    arch = PredictorArch(kind="linear", input_dim=impression.features.shape[1])
    init = DifferentiablePredictor.initialize(arch, derive_seed(cfg.seed, "student-init"))
    baseline, _ = train(init, impression.features, impression.labels, cfg.train_config())
    distilled, _ = distill_train(init, impression, consideration, cfg.distill_config())

    # Evaluation traffic is logged by the incumbent system: the baseline
    # student serves stage 1, the production teacher stage 2. Both
    # students are judged on this one shared pair of datasets.
    eval_impression, eval_consideration, imp_teacher = _accumulate_traffic(
        cfg, "eval", cfg.eval_days, ModelScorer(baseline), stage2
    )

    evaluation = evaluate_cross_stage(
        baseline,
        distilled,
        eval_impression,
        eval_consideration,
        baseline_id=f"supervised-seed{cfg.seed}",
        candidate_id=f"distilled-seed{cfg.seed}",
        impression_teacher_pred=imp_teacher,
    )
    return DistillExperimentResult(
        evaluation=evaluation,
        baseline=baseline,
        distilled=distilled,
        train_impression_size=len(impression),
        train_consideration_size=len(consideration),
    )
