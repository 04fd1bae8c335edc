"""
Expert and router training, top-k selection and logit-level fusion.

Experts are binary (2-logit) classifiers, one per CWE subspace; the router is a
multi-class classifier over the same subspaces trained on vulnerable code only.
For each input the k most probable experts are evaluated and their logits are
combined with the renormalized router probabilities.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

from .artifacts import iter_jsonl, read_json, write_json, write_jsonl
from .checkpoints import load_checkpoint, save_checkpoint
from .nn import Architecture, LossSpec, forward, init_params, predict, softmax_t, train
from .rng import derive_seed
from .validators import validate_finite

logger = logging.getLogger("moekd")

# ============================================================================
# DOMAIN TYPES
# ============================================================================


@dataclass(frozen=True, eq=False)
class ExpertSet:
    experts: tuple  # ((group name, ClassifierParams), ...) in grouping order
    grouping: object

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        names = [name for name, _ in self.experts]
        if names != self.grouping.names:
            raise ValidationError(
                f"Experts {names} do not match grouping order {self.grouping.names}.",
                code="expert_mismatch",
            )
        dims = {params.arch.input_dim for _, params in self.experts}
        if len(dims) > 1 or any(params.arch.classes != 2 for _, params in self.experts):
            raise ValidationError("Experts must share input dim and have 2 classes.", code="expert_mismatch")

    def __len__(self):
        return len(self.experts)

    @property
    def input_dim(self):
        return self.experts[0][1].arch.input_dim


@dataclass(frozen=True, eq=False)
class RouterModel:
    params: object
    grouping: object

    def __post_init__(self):
        if self.params.arch.classes != len(self.grouping.groups):
            raise ValidationError(
                f"Router has {self.params.arch.classes} classes for {len(self.grouping.groups)} experts.",
                code="expert_mismatch",
            )


@dataclass(frozen=True)
class Selection:
    indices: tuple
    weights: tuple


@dataclass(frozen=True, eq=False)
class FusedKnowledge:
    sample_id: str
    fused_logits: np.ndarray
    selection: Selection

    def to_record(self):
        return {
            "id": self.sample_id,
            "fused_logits": [float(v) for v in self.fused_logits],
            "indices": list(self.selection.indices),
            "weights": list(self.selection.weights),
        }


# ============================================================================
# TRAINING
# ============================================================================


def expert_targets(group, samples, grouping):
    """1 for vulnerable samples of ``group``; 0 for other CWEs and for non-vulnerable code."""
    return [
        1 if sample.is_vulnerable and grouping.group_of(sample.cwe) == group else 0
        for sample in samples
    ]


def train_expert(group, expert_train, grouping, features, cfg, arch):
    """
    Train the binary expert for one CWE subspace with cross-entropy.

    Args:
        group: group name from ``grouping``
        expert_train: samples of the expert-train split
        grouping: CweGrouping
        features: mapping sample id -> FeatureVector
        cfg: TrainConfig (loss must be "bce")
        arch: Architecture (classes forced to 2)

    Raises:
        ValidationError: unknown group, empty split or no positives
    """
    if group not in grouping.names:
        raise ValidationError(f"Unknown CWE group {group!r}.", code="unknown_group")
    if not expert_train:
        raise ValidationError("Expert training split is empty.", code="empty")
    targets = expert_targets(group, expert_train, grouping)
    positives = sum(targets)
    if positives == 0:
        raise ValidationError(f"Group {group!r} has no positive samples in expert_train.", code="no_positives")

    seed = derive_seed(cfg.seed, "expert", group)
    arch = Architecture(arch.input_dim, arch.hidden, 2)
    data = [(features[sample.id], target) for sample, target in zip(expert_train, targets)]
    result = train(init_params(arch, seed), data, cfg.with_seed(seed))
    logger.info(
        f"Expert {group}: {positives} positives / {len(targets)} samples, "
        f"final loss {result.loss_trace[-1]:.6f}"
    )
    return result.params


def train_experts(expert_train, grouping, features, cfg, arch, workers=1):
    """One expert per group; independent jobs, returned in grouping order."""

    def job(group):
        return group, train_expert(group, expert_train, grouping, features, cfg, arch)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            experts = list(pool.map(job, grouping.names))
    else:
        experts = [job(group) for group in grouping.names]
    return ExpertSet(tuple(experts), grouping)


def inverse_frequency_alpha(counts):
    """Inverse class frequency, normalized to mean 1."""
    inverse = 1.0 / np.asarray(counts, dtype=np.float64)
    return tuple(float(a) for a in inverse / inverse.mean())


def router_targets(samples, grouping):
    """(vulnerable samples, group index per sample); non-vulnerable samples are dropped."""
    vulnerable = [sample for sample in samples if sample.is_vulnerable]
    targets = []
    for sample in vulnerable:
        index = grouping.index_of(sample.cwe)
        if index is None:
            raise ValidationError(f"Sample {sample.id} has unmapped CWE {sample.cwe!r}.", code="unknown_group")
        targets.append(index)
    return vulnerable, targets


def router_loss(loss, counts):
    """The router's loss with alpha filled in from group counts when unset."""
    if loss.kind != "focal":
        return loss
    alpha = loss.alpha if loss.alpha is not None else inverse_frequency_alpha(counts)
    if len(alpha) != len(counts):
        raise ValidationError(f"alpha has {len(alpha)} entries for {len(counts)} groups.", code="invalid")
    return LossSpec("focal", alpha, loss.gamma, loss.temperature)


def train_router(expert_train, grouping, features, cfg, arch):
    """
    Train the CWE router on the vulnerable part of ``expert_train``.

    With a focal loss and no explicit alpha, alpha is the inverse group frequency.

    Raises:
        ValidationError: a group has no vulnerable training sample, or a tag
            cannot be mapped to a group
    """
    vulnerable, targets = router_targets(expert_train, grouping)
    counts = np.bincount(np.asarray(targets, dtype=np.int64), minlength=len(grouping.groups))
    absent = [name for name, count in zip(grouping.names, counts) if count == 0]
    if absent:
        raise ValidationError(
            f"Router training set has no samples for: {', '.join(absent)}", code="absent_group"
        )
    loss = router_loss(cfg.loss, counts)

    seed = derive_seed(cfg.seed, "router")
    arch = Architecture(arch.input_dim, arch.hidden, len(grouping.groups))
    data = [(features[sample.id], target) for sample, target in zip(vulnerable, targets)]
    result = train(init_params(arch, seed), data, cfg.with_loss(loss).with_seed(seed))
    logger.info(f"Router: {len(vulnerable)} vulnerable samples, final loss {result.loss_trace[-1]:.6f}")
    return RouterModel(result.params, grouping)


# ============================================================================
# ROUTING AND FUSION
# ============================================================================


def route(router, x):
    """Router probabilities over experts (softmax at T=1)."""
    return softmax_t(forward(router.params, x), 1.0)


def select_topk(probs, k):
    """
    The k most probable experts with convex weights.

    Ties go to the lower index. Weights are the selected probabilities divided
    by their sum.

    Raises:
        ValidationError: k outside [1, N], or a selected probability <= 0
    """
    probs = validate_finite(probs, "router probabilities")
    n = probs.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} is outside [1, {n}].", code="k_out_of_range")
    indices = np.argsort(-probs, kind="stable")[:k]
    selected = probs[indices]
    if np.any(selected <= 0.0):
        raise ValidationError("Selected expert has zero probability.", code="zero_weight")
    weights = selected / selected.sum()
    return Selection(tuple(int(i) for i in indices), tuple(float(w) for w in weights))


def fuse_logits(experts, selection, x, sample_id=""):
    """Weighted sum of the selected experts' logits; unselected experts are never run."""
    fused = np.zeros(2)
    for index, weight in zip(selection.indices, selection.weights):
        if not 0 <= index < len(experts):
            raise ValidationError(f"Expert index {index} out of range.", code="k_out_of_range")
        fused += weight * forward(experts.experts[index][1], x)
    return FusedKnowledge(sample_id, fused, selection)


def moe_knowledge(router, experts, x, k, sample_id=""):
    """route -> select_topk -> fuse_logits for one input."""
    return fuse_logits(experts, select_topk(route(router, x), k), x, sample_id)


def moe_teacher_accuracy(router, experts, samples, features, k):
    """Argmax accuracy of the fused logits; the MoE as a classifier in its own right."""
    if not samples:
        return None
    hits = sum(
        int(int(np.argmax(moe_knowledge(router, experts, features[sample.id], k).fused_logits)) == sample.label)
        for sample in samples
    )
    return hits / len(samples)


def expert_subspace_accuracy(params, group, samples, grouping, features):
    """Accuracy on the group's vulnerable samples (target 1) and on non-vulnerable code (target 0)."""
    hits = total = 0
    for sample in samples:
        if sample.is_vulnerable and grouping.group_of(sample.cwe) != group:
            continue
        total += 1
        hits += int(predict(params, features[sample.id]) == int(sample.is_vulnerable))
    return hits / total if total else None


def router_accuracy(router, samples, features):
    """Top-1 accuracy over vulnerable samples whose CWE maps to a group; None if there are none."""
    hits = total = 0
    for sample in samples:
        if not sample.is_vulnerable:
            continue
        index = router.grouping.index_of(sample.cwe)
        if index is None:
            continue
        total += 1
        hits += int(np.argmax(route(router, features[sample.id])) == index)
    return hits / total if total else None


# ============================================================================
# PERSISTENCE
# ============================================================================


def save_fused(path, knowledge):
    return write_jsonl(path, [item.to_record() for item in knowledge])


def load_fused(path):
    knowledge = []
    for line_number, record in iter_jsonl(path):
        try:
            logits = validate_finite(record["fused_logits"], f"line {line_number} fused_logits")
            selection = Selection(tuple(record["indices"]), tuple(record["weights"]))
            knowledge.append(FusedKnowledge(record["id"], logits, selection))
        except (KeyError, TypeError) as exc:
            raise ValidationError(
                f"{path.name} line {line_number}: malformed fused record ({exc}).", code="malformed_record"
            ) from exc
    return knowledge


def save_expert_set(experts, directory, loss=None, seed=None):
    """One MOEKD1 checkpoint per expert plus an index file; returns every written path."""
    written = []
    index = []
    for position, (name, params) in enumerate(experts.experts):
        path = directory / f"expert-{position:02d}.moekd"
        written.append(save_checkpoint(path, params, loss, seed))
        index.append({"group": name, "file": path.name})
    written.append(write_json(directory / "experts.json", index))
    return written


def load_expert_set(directory, grouping):
    entries = read_json(directory / "experts.json")
    experts = tuple(
        (entry["group"], load_checkpoint(directory / entry["file"])[0]) for entry in entries
    )
    return ExpertSet(experts, grouping)
