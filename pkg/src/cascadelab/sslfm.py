"""Multi-task distillation from a foundation teacher for the last stage.

The final ranking stage has no later production model to learn from, so a
non-serving foundation teacher stands in: a wider, deeper predictor
trained with extra informative features the student never sees. Transfer
runs through two added heads, both trained on unlabeled data only with
the teacher's output as target:

  * dependent head  — consumes the main head's output probability;
  * auxiliary head  — consumes the shared trunk representation.

The main head keeps its ordinary supervised loss on labeled data. Head
gradients flow back into the trunk (and, for the dependent head, through
the main head's output path); that leakage is the transfer mechanism.
With both head weights at zero the run is bit-identical to plain
supervised training of the same trunk.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError
from .metrics import normalized_entropy, relative_change
from .predictor import (
    DifferentiablePredictor,
    Layers,
    PredictorArch,
    TrainConfig,
    backward_from_logit,
    bce_mean,
    forward_cache,
    glorot_layers,
    grad_logit_bce,
    train,
    _Optimizer,
    _l2_apply,
)
from .rng import derive_seed, substream
from .synthgen import (
    LabeledDataset,
    NoisyTruthScorer,
    PoolConfig,
    UnlabeledDataset,
    generate_pool,
    make_splits,
    restrict_features,
    run_cascade,
)
from . import distill as _distill

VARIANTS = ("baseline", "dependent_only", "auxiliary_only", "both")

DEP_HEAD_HIDDEN = 4  # two-layer transform of the scalar main output
AUX_HEAD_HIDDEN = 8


@dataclass(frozen=True)
class MultiTaskArch:
    trunk: PredictorArch  # the plain student (trunk + main head)
    variant: str

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def has_dependent(self) -> bool:
        return self.variant in ("dependent_only", "both")

    @property
    def has_auxiliary(self) -> bool:
        return self.variant in ("auxiliary_only", "both")


def _head_arch(input_dim: int, hidden: int) -> PredictorArch:
    return PredictorArch("feedforward", input_dim, (hidden,))


@dataclass
class MultiTaskStudent:
    """Shared trunk + main head, with optional distillation heads.

    The trunk-plus-main-head parameters are laid out exactly like the
    plain predictor of the same arch (and come from the same init
    substream), so the baseline variant is that predictor, bit for bit.
    """

    arch: MultiTaskArch
    backbone: DifferentiablePredictor
    dependent: DifferentiablePredictor | None
    auxiliary: DifferentiablePredictor | None

    @classmethod
    def initialize(cls, arch: MultiTaskArch, seed: int) -> "MultiTaskStudent":
        backbone = DifferentiablePredictor.initialize(arch.trunk, seed)
        hidden_dim = arch.trunk.hidden_sizes[-1] if arch.trunk.hidden_sizes else arch.trunk.input_dim
        dependent = None
        auxiliary = None
        if arch.has_dependent:
            dependent = DifferentiablePredictor(
                arch=_head_arch(1, DEP_HEAD_HIDDEN),
                layers=glorot_layers(_head_arch(1, DEP_HEAD_HIDDEN), derive_seed(seed, "dep-head")),
                init_seed=seed,
            )
        if arch.has_auxiliary:
            auxiliary = DifferentiablePredictor(
                arch=_head_arch(hidden_dim, AUX_HEAD_HIDDEN),
                layers=glorot_layers(
                    _head_arch(hidden_dim, AUX_HEAD_HIDDEN), derive_seed(seed, "aux-head")
                ),
                init_seed=seed,
            )
        return cls(arch=arch, backbone=backbone, dependent=dependent, auxiliary=auxiliary)

    @property
    def num_params(self) -> int:
        total = self.backbone.arch.num_params
        if self.dependent is not None:
            total += self.dependent.arch.num_params
        if self.auxiliary is not None:
            total += self.auxiliary.arch.num_params
        return total

    def predict_batch(self, features: np.ndarray) -> np.ndarray:
        """Serving path: the main head only."""
        return self.backbone.predict_batch(features)

    def dependent_output(self, features: np.ndarray) -> np.ndarray:
        if self.dependent is None:
            raise ConfigError("this variant has no dependent head")
        z = self.backbone.predict_batch(features)
        return self.dependent.predict_batch(z[:, None])

    def auxiliary_output(self, features: np.ndarray) -> np.ndarray:
        if self.auxiliary is None:
            raise ConfigError("this variant has no auxiliary head")
        cache = forward_cache(self.backbone.layers, self.backbone.arch.activation, features)
        return self.auxiliary.predict_batch(cache.hidden)


@dataclass(frozen=True)
class SSLFMConfig:
    teacher_arch: PredictorArch
    lambda_dep: float = 0.5
    lambda_aux: float = 0.5
    train: TrainConfig = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.lambda_dep < 0 or self.lambda_aux < 0:
            raise ConfigError("head loss weights must be >= 0")
        if self.train is None:
            raise ConfigError("a TrainConfig is required")

    def validate_capacity(self, student_trunk: PredictorArch) -> None:
        if self.teacher_arch.num_params <= student_trunk.num_params:
            raise ConfigError(
                "the foundation teacher must be strictly larger than the student trunk"
            )


@dataclass(frozen=True)
class BatchAuditEntry:
    step: int
    supervised_rows: str  # "labeled"
    head_rows: str | None  # "unlabeled" when head losses ran, else None


def sslfm_train(
    student: MultiTaskStudent,
    teacher: DifferentiablePredictor,
    labeled: LabeledDataset,
    unlabeled: UnlabeledDataset,
    config: SSLFMConfig,
    teacher_feature_view: tuple[int, ...] | None = None,
    student_feature_view: tuple[int, ...] | None = None,
) -> tuple[MultiTaskStudent, list[float], list[BatchAuditEntry]]:
    """Supervised main loss on labeled batches; head losses on unlabeled only.

    The teacher is invoked directly on the unlabeled rows (optionally
    seeing more feature columns than the student). Returns the trained
    student, the epoch history of the combined objective, and an audit
    log recording which data each loss term consumed per step.
    """
    lam_dep = config.lambda_dep
    lam_aux = config.lambda_aux
    if lam_dep > 0 and student.dependent is None:
        raise ConfigError("lambda_dep > 0 but the variant has no dependent head")
    if lam_aux > 0 and student.auxiliary is None:
        raise ConfigError("lambda_aux > 0 but the variant has no auxiliary head")

    def view(x: np.ndarray, cols) -> np.ndarray:
        return x if cols is None else x[:, list(cols)]

    x_lab = view(labeled.features, student_feature_view)
    y_lab = labeled.labels
    x_unlab = view(unlabeled.features, student_feature_view)
    x_unlab_teacher = view(unlabeled.features, teacher_feature_view)
    if x_unlab_teacher.shape[1] != teacher.arch.input_dim:
        raise DimensionError("teacher feature view does not match the teacher's input_dim")
    z_teacher = teacher.predict_batch(x_unlab_teacher) if len(unlabeled) else np.empty(0)

    tc = config.train
    arch = student.backbone.arch
    trunk = [(w.copy(), b.copy()) for w, b in student.backbone.layers]
    dep = None if student.dependent is None else [(w.copy(), b.copy()) for w, b in student.dependent.layers]
    aux = None if student.auxiliary is None else [(w.copy(), b.copy()) for w, b in student.auxiliary.layers]

    opt_trunk = _Optimizer(tc, trunk)
    opt_dep = None if dep is None else _Optimizer(tc, dep)
    opt_aux = None if aux is None else _Optimizer(tc, aux)
    use_heads = (lam_dep > 0 or lam_aux > 0) and len(unlabeled) > 0

    def objective(tr: Layers, dp, ax) -> float:
        total = bce_mean(y_lab, forward_cache(tr, arch.activation, x_lab).z)
        if use_heads:
            cache = forward_cache(tr, arch.activation, x_unlab)
            if lam_dep > 0:
                zd = forward_cache(dp, "relu", cache.z[:, None]).z
                total += lam_dep * bce_mean(z_teacher, zd)
            if lam_aux > 0:
                za = forward_cache(ax, "relu", cache.hidden).z
                total += lam_aux * bce_mean(z_teacher, za)
        return total

    n = len(labeled)
    history = [objective(trunk, dep, aux)]
    audit: list[BatchAuditEntry] = []
    step = 0
    u_at = 0
    for epoch in range(tc.epochs):
        perm = substream(tc.seed, "shuffle", epoch).permutation(n)
        perm_unlab = (
            substream(tc.seed, "shuffle-unlabeled", epoch).permutation(len(unlabeled))
            if use_heads
            else None
        )
        for start in range(0, n, tc.batch_size):
            idx = perm[start : start + tc.batch_size]
            cache = forward_cache(trunk, arch.activation, x_lab[idx])
            g_logit = grad_logit_bce(cache, y_lab[idx], None, 1.0 / len(idx))
            g_trunk, _ = backward_from_logit(trunk, arch.activation, cache, g_logit)
            g_dep = g_aux = None

            if use_heads:
                take = []
                for _ in range(min(tc.batch_size, len(unlabeled))):
                    take.append(perm_unlab[u_at])
                    u_at = (u_at + 1) % len(perm_unlab)
                uidx = np.asarray(take)
                ucache = forward_cache(trunk, arch.activation, x_unlab[uidx])
                zt = z_teacher[uidx]
                g_u_logit = np.zeros(len(uidx))

                if lam_dep > 0:
                    dcache = forward_cache(dep, "relu", ucache.z[:, None])
                    g_d = grad_logit_bce(dcache, zt, None, lam_dep / len(uidx))
                    g_dep, g_dz = backward_from_logit(dep, "relu", dcache, g_d)
                    # chain into the main output: dz/dlogit = z(1-z) off-clip
                    dz_dlogit = np.where(ucache.clip_mask, 0.0, ucache.z * (1.0 - ucache.z))
                    g_u_logit = g_u_logit + g_dz.ravel() * dz_dlogit
                if lam_aux > 0:
                    acache = forward_cache(aux, "relu", ucache.hidden)
                    g_a = grad_logit_bce(acache, zt, None, lam_aux / len(uidx))
                    g_aux, g_hidden = backward_from_logit(aux, "relu", acache, g_a)

                # trunk gradient from the unlabeled pass
                if lam_dep > 0 or lam_aux > 0:
                    gu_trunk, _ = backward_from_logit(trunk, arch.activation, ucache, g_u_logit)
                    if lam_aux > 0 and arch.hidden_sizes:
                        # add the auxiliary head's pull on the last hidden layer
                        extra = _trunk_grads_from_hidden(trunk, arch, ucache, g_hidden)
                        gu_trunk = [
                            (gw + ew, gb + eb) for (gw, gb), (ew, eb) in zip(gu_trunk, extra)
                        ]
                    elif lam_aux > 0:
                        pass  # linear trunk: hidden == inputs, nothing upstream
                    g_trunk = [
                        (gw + uw, gb + ub) for (gw, gb), (uw, ub) in zip(g_trunk, gu_trunk)
                    ]
                audit.append(BatchAuditEntry(step, "labeled", "unlabeled"))
            else:
                audit.append(BatchAuditEntry(step, "labeled", None))

            _l2_apply(g_trunk, trunk, tc.l2)
            trunk = opt_trunk.step(trunk, g_trunk)
            if dep is not None:
                if g_dep is None:
                    g_dep = [(np.zeros_like(w), np.zeros_like(b)) for w, b in dep]
                _l2_apply(g_dep, dep, tc.l2)
                dep = opt_dep.step(dep, g_dep)
            if aux is not None:
                if g_aux is None:
                    g_aux = [(np.zeros_like(w), np.zeros_like(b)) for w, b in aux]
                _l2_apply(g_aux, aux, tc.l2)
                aux = opt_aux.step(aux, g_aux)
            step += 1
        loss = objective(trunk, dep, aux)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at epoch {epoch}")
        history.append(loss)

    out = MultiTaskStudent(
        arch=student.arch,
        backbone=DifferentiablePredictor(arch=arch, layers=trunk, init_seed=student.backbone.init_seed),
        dependent=None
        if dep is None
        else DifferentiablePredictor(arch=student.dependent.arch, layers=dep),
        auxiliary=None
        if aux is None
        else DifferentiablePredictor(arch=student.auxiliary.arch, layers=aux),
    )
    return out, history, audit


def _trunk_grads_from_hidden(
    trunk: Layers, arch: PredictorArch, cache, g_hidden: np.ndarray
) -> Layers:
    """Backprop a gradient wrt the last hidden activation through the trunk."""
    from .predictor import _activate_grad

    grads: Layers = [(np.zeros_like(w), np.zeros_like(b)) for w, b in trunk]
    delta = g_hidden * _activate_grad(cache.pres[-1], cache.posts[-1], arch.activation)
    for li in range(len(trunk) - 2, -1, -1):
        h_in = cache.posts[li - 1] if li > 0 else cache.inputs
        grads[li] = (h_in.T @ delta, delta.sum(axis=0))
        if li > 0:
            w, _ = trunk[li]
            delta = (delta @ w.T) * _activate_grad(
                cache.pres[li - 1], cache.posts[li - 1], arch.activation
            )
    return grads


@dataclass(frozen=True)
class SSLFMExperimentConfig:
    """Last-stage student distilling from a feature-privileged teacher.

    The pool carries ``student_dims + extra_dims`` features; the student
    (and the production scorers' consumers downstream) see only the first
    ``student_dims``, the foundation teacher sees everything.
    """

    seed: int
    pool_candidates: int = 20_000
    student_dims: int = 20
    extra_dims: int = 10
    cascade_sizes: tuple[int, ...] = (4_000, 2_000)
    stage1_noise: float = 1.2
    stage2_noise: float = 0.6
    train_days: int = 10
    student_days: int = 2
    eval_days: int = 8
    bias: float = -3.0
    student_hidden: tuple[int, ...] = (8,)
    teacher_hidden: tuple[int, ...] = (32, 16)
    lambda_dep: float = 0.5
    lambda_aux: float = 0.5
    epochs: int = 60
    teacher_epochs: int = 40
    learning_rate: float = 0.01
    batch_size: int = 128
    l2: float = 1e-3

    @property
    def total_dims(self) -> int:
        return self.student_dims + self.extra_dims

    @property
    def student_view(self) -> tuple[int, ...]:
        return tuple(range(self.student_dims))

    def pool_config(self, which: str, day: int) -> PoolConfig:
        weights = [0.0] * self.total_dims
        visible = (1.0, -0.8, 0.6, -0.5, 0.4, 0.3, -0.25, 0.2)
        for i, w in enumerate(visible):
            weights[i] = w
        extra = (0.7, -0.6, 0.55, -0.5, 0.45, -0.4, 0.35, -0.3, 0.3, 0.25)
        for i, w in enumerate(extra[: self.extra_dims]):
            weights[self.student_dims + i] = w
        return PoolConfig(
            num_candidates=self.pool_candidates,
            num_features=self.total_dims,
            informative_weights=tuple(weights),
            bias=self.bias,
            seed=derive_seed(self.seed, "pool", which, day),
        )

    def student_trunk(self) -> PredictorArch:
        return PredictorArch("feedforward", self.student_dims, self.student_hidden)

    def teacher_arch(self) -> PredictorArch:
        return PredictorArch("feedforward", self.total_dims, self.teacher_hidden)

    def train_config(self, name: str) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.teacher_epochs if name == "teacher" else self.epochs,
            batch_size=self.batch_size,
            optimizer="adam",
            l2=self.l2,
            seed=derive_seed(self.seed, "train", name),
        )


@dataclass(frozen=True)
class SSLFMVariantRow:
    variant: str
    ne: float
    ne_relative_change_pct: float


@dataclass(frozen=True)
class SSLFMResult:
    rows: tuple[SSLFMVariantRow, ...]
    teacher_ne: float
    baseline_ne: float
    teacher_dominates: bool

    def row(self, variant: str) -> SSLFMVariantRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def render_text(self) -> str:
        labels = {
            "baseline": "Baseline",
            "dependent_only": "Dependent task only",
            "auxiliary_only": "Auxiliary task only",
            "both": "Dependent + auxiliary task",
        }
        rows = [
            (labels[r.variant], f"{r.ne_relative_change_pct:+.3f}%")
            for r in self.rows
        ]
        return _distill.render_comparison_table(("Model", "NE relative change"), rows)

    def to_json(self, provenance: dict | None = None) -> str:
        payload = {
            "teacher_ne": self.teacher_ne,
            "baseline_ne": self.baseline_ne,
            "teacher_dominates": self.teacher_dominates,
            "rows": [
                {"variant": r.variant, "ne": r.ne, "ne_relative_change_pct": r.ne_relative_change_pct}
                for r in self.rows
            ],
        }
        if provenance is not None:
            payload["provenance"] = provenance
        return json.dumps(payload, sort_keys=True, indent=2)


def run_sslfm_experiment(
    cfg: SSLFMExperimentConfig, variants: tuple[str, ...] = VARIANTS
) -> SSLFMResult:
    stage1 = NoisyTruthScorer(cfg.stage1_noise, derive_seed(cfg.seed, "prod-stage1"))
    stage2 = NoisyTruthScorer(cfg.stage2_noise, derive_seed(cfg.seed, "prod-stage2"))

    def traffic(which: str, days: int):
        imps, cons = [], []
        for day in range(days):
            pool = generate_pool(cfg.pool_config(which, day))
            imp, con = make_splits(run_cascade(pool, [stage1, stage2], cfg.cascade_sizes), pool)
            imps.append(imp)
            cons.append(con)
        return imps, cons

    imps, cons = traffic("train", cfg.train_days)
    eval_imps, _ = traffic("eval", cfg.eval_days)
    eval_labeled = _distill.concat_labeled(eval_imps)

    # The foundation teacher digests the full impression history; the
    # production student retrains on recent days only. Consideration
    # logging is free, so the student distills on all of it.
    teacher_labeled = _distill.concat_labeled(imps)
    labeled = _distill.concat_labeled(imps[: cfg.student_days])
    unlabeled = _distill.concat_unlabeled(cons)

    teacher_init = DifferentiablePredictor.initialize(
        cfg.teacher_arch(), derive_seed(cfg.seed, "teacher-init")
    )
    teacher, _ = train(
        teacher_init, teacher_labeled.features, teacher_labeled.labels, cfg.train_config("teacher")
    )

    sslfm_config = SSLFMConfig(
        teacher_arch=cfg.teacher_arch(),
        lambda_dep=cfg.lambda_dep,
        lambda_aux=cfg.lambda_aux,
        train=cfg.train_config("student"),
    )
    sslfm_config.validate_capacity(cfg.student_trunk())

    # Teacher-dominance precondition on the held-out labeled set.
    teacher_ne = normalized_entropy(
        eval_labeled.labels, teacher.predict_batch(eval_labeled.features)
    ).ne
    eval_student_x = eval_labeled.features[:, list(cfg.student_view)]

    def run_variant(variant: str) -> float:
        student = MultiTaskStudent.initialize(
            MultiTaskArch(cfg.student_trunk(), variant), derive_seed(cfg.seed, "student-init")
        )
        lam_dep = cfg.lambda_dep if student.arch.has_dependent else 0.0
        lam_aux = cfg.lambda_aux if student.arch.has_auxiliary else 0.0
        variant_config = SSLFMConfig(
            teacher_arch=cfg.teacher_arch(),
            lambda_dep=lam_dep,
            lambda_aux=lam_aux,
            train=cfg.train_config("student"),
        )
        trained, _, _ = sslfm_train(
            student,
            teacher,
            labeled,
            unlabeled,
            variant_config,
            teacher_feature_view=None,
            student_feature_view=cfg.student_view,
        )
        return normalized_entropy(
            eval_labeled.labels, trained.predict_batch(eval_student_x)
        ).ne

    baseline_ne = run_variant("baseline")
    rows = [SSLFMVariantRow("baseline", baseline_ne, 0.0)]
    for variant in variants:
        if variant == "baseline":
            continue
        ne = run_variant(variant)
        rows.append(SSLFMVariantRow(variant, ne, relative_change(ne, baseline_ne)))
    return SSLFMResult(
        rows=tuple(rows),
        teacher_ne=teacher_ne,
        baseline_ne=baseline_ne,
        teacher_dominates=teacher_ne < baseline_ne,
    )
