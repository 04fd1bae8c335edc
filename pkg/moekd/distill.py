"""
Soft-knowledge generation and student distillation.

The student only ever sees feature vectors and teacher logits: no function in
this module that trains a student receives a CodeSample.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

from .artifacts import iter_jsonl, write_jsonl
from .moe import moe_knowledge
from .nn import Architecture, accuracy, forward, forward_batch, init_params, train
from .rng import derive_seed
from .validators import validate_finite, validate_power_of_two

logger = logging.getLogger("moekd")


# ============================================================================
# DOMAIN TYPES
# ============================================================================


@dataclass(frozen=True, eq=False)
class SoftLabelSet:
    records: tuple  # ((sample id, length-2 logits), ...)
    temperature: float

    def __post_init__(self):
        records = []
        for sample_id, logits in self.records:
            logits = validate_finite(logits, f"teacher logits of {sample_id}")
            if logits.shape != (2,):
                raise ValidationError(
                    f"Teacher logits of {sample_id} have shape {logits.shape}, expected (2,).",
                    code="dimension_mismatch",
                )
            records.append((sample_id, logits))
        object.__setattr__(self, "records", tuple(records))

    def __len__(self):
        return len(self.records)

    @property
    def ids(self):
        return [sample_id for sample_id, _ in self.records]

    @classmethod
    def from_fused(cls, knowledge, temperature):
        return cls(tuple((item.sample_id, item.fused_logits) for item in knowledge), temperature)


@dataclass(frozen=True)
class StudentSpec:
    input_dim: int
    hidden: int
    budget: int | None = None
    name: str = ""

    def __post_init__(self):
        validate_power_of_two(self.input_dim)
        if self.hidden < 0:
            raise ValidationError("hidden must be >= 0.", code="invalid")
        if not self.name:
            object.__setattr__(self, "name", f"d{self.input_dim}-h{self.hidden}")
        if self.budget is not None and self.parameter_count > self.budget:
            raise ValidationError(
                f"Student {self.name} has {self.parameter_count} parameters, over budget {self.budget}.",
                code="over_budget",
            )

    @property
    def architecture(self):
        return Architecture(self.input_dim, self.hidden, 2)

    @property
    def parameter_count(self):
        return self.architecture.parameter_count

    def to_dict(self):
        return {
            "name": self.name,
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "budget": self.budget,
            "parameters": self.parameter_count,
        }


# ============================================================================
# SOFT KNOWLEDGE
# ============================================================================


def generate_soft_knowledge(router, experts, distill_ids, features, k, temperature=2.0, workers=1):
    """
    Fused MoE logits for every distill sample, in the order given.

    Args:
        router: RouterModel
        experts: ExpertSet
        distill_ids: sample ids of the distillation split, corpus order
        features: mapping sample id -> FeatureVector at the teachers' dim
        k: experts per sample
        temperature: distillation temperature carried with the set
        workers: threads used for per-sample fusion

    Returns:
        (SoftLabelSet, list of FusedKnowledge)
    """

    def fuse(sample_id):
        return moe_knowledge(router, experts, features[sample_id], k, sample_id)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            knowledge = list(pool.map(fuse, distill_ids))
    else:
        knowledge = [fuse(sample_id) for sample_id in distill_ids]
    logger.info(f"Fused top-{k} knowledge for {len(knowledge)} distill samples")
    return SoftLabelSet.from_fused(knowledge, temperature), knowledge


def single_teacher_knowledge(teacher, distill_ids, features, temperature=2.0):
    return SoftLabelSet(
        tuple((sample_id, forward(teacher, features[sample_id])) for sample_id in distill_ids),
        temperature,
    )


def save_soft_labels(path, soft):
    return write_jsonl(
        path, [{"id": sample_id, "logits": [float(v) for v in logits]} for sample_id, logits in soft.records]
    )


def load_soft_labels(path, temperature):
    records = []
    for line_number, record in iter_jsonl(path):
        try:
            records.append((record["id"], record["logits"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(
                f"{path.name} line {line_number}: malformed soft label ({exc}).", code="malformed_record"
            ) from exc
    return SoftLabelSet(tuple(records), temperature)


# ============================================================================
# STUDENT TRAINING
# ============================================================================


def student_seed(cfg, spec):
    """Initialization seed shared by every student of the same shape."""
    return derive_seed(cfg.seed, "student", spec.input_dim, spec.hidden)


def train_student(spec, soft, features, cfg):
    """
    Fit a student to soft teacher logits with the temperature-scaled kd loss.

    Ground-truth labels are not an input. The kd temperature comes from
    ``cfg.loss``; ``soft.temperature`` is only a hint carried with the set.

    Args:
        spec: StudentSpec
        soft: SoftLabelSet
        features: mapping sample id -> FeatureVector at ``spec.input_dim``
        cfg: TrainConfig with a kd loss

    Returns:
        TrainResult

    Raises:
        ValidationError: a soft record has no features, or the loss is not kd
    """
    if cfg.loss.kind != "kd":
        raise ValidationError(f"Student training needs a kd loss, got {cfg.loss.kind!r}.", code="invalid")
    missing = [sample_id for sample_id in soft.ids if sample_id not in features]
    if missing:
        raise ValidationError(
            f"No features for soft record(s): {', '.join(missing[:5])}", code="missing_features"
        )
    if not len(soft):
        raise ValidationError("Soft label set is empty.", code="empty")

    seed = student_seed(cfg, spec)
    data = [(features[sample_id], logits) for sample_id, logits in soft.records]
    result = train(init_params(spec.architecture, seed), data, cfg.with_seed(seed))
    logger.info(
        f"Student {spec.name}: {spec.parameter_count} params, {result.epochs_run} epochs, "
        f"final kd loss {result.loss_trace[-1]:.6f}"
    )
    return result


def train_monolithic_teacher(expert_train, features, cfg, arch):
    """Binary classifier over all of expert_train with cross-entropy on the true labels."""
    if not expert_train:
        raise ValidationError("Expert training split is empty.", code="empty")
    seed = derive_seed(cfg.seed, "single-teacher")
    arch = Architecture(arch.input_dim, arch.hidden, 2)
    data = [(features[sample.id], sample.label) for sample in expert_train]
    result = train(init_params(arch, seed), data, cfg.with_seed(seed))
    logger.info(f"Single teacher: {len(data)} samples, final loss {result.loss_trace[-1]:.6f}")
    return result.params


def train_single_teacher_baseline(spec, teacher, distill_ids, teacher_features, student_features, cfg):
    """Same kd procedure and initialization as ``train_student``; only the teacher logits differ."""
    soft = single_teacher_knowledge(teacher, distill_ids, teacher_features, cfg.loss.temperature)
    return train_student(spec, soft, student_features, cfg)


# ============================================================================
# EVALUATION
# ============================================================================


def evaluate(params, samples, features):
    """Argmax accuracy on labeled samples; the single path used for every model."""
    samples = list(samples)
    if not samples:
        return None
    X = np.stack([features[sample.id].values for sample in samples])
    return accuracy(params, X, [sample.label for sample in samples])


def teacher_agreement(params, soft, features):
    """Fraction of soft records where the student's argmax matches the teacher's."""
    if not len(soft):
        return None
    X = np.stack([features[sample_id].values for sample_id in soft.ids])
    logits, _ = forward_batch(params, X)
    teacher = np.stack([teacher_logits for _, teacher_logits in soft.records])
    return float(np.mean(np.argmax(logits, axis=1) == np.argmax(teacher, axis=1)))
