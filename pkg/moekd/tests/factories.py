"""Small builders shared by the test modules."""

import numpy as np

from moekd.corpus import CodeSample, CweGroup, CweGrouping, SyntheticGroup, SyntheticSpec
from moekd.features import hashed_slot
from moekd.nn import Architecture, ClassifierParams, LossSpec, TrainConfig


def make_sample(sample_id, label=0, cwe=None, project="proj-00", loc=10, code=None):
    if code is None:
        code = f"int {sample_id.replace('-', '_')}(int a) {{ return a; }}"
    if label == 1 and cwe is None:
        cwe = "CWE-unknown"
    return CodeSample(sample_id, code, label, cwe, project, loc)


def make_grouping(*names):
    return CweGrouping(tuple(CweGroup(name, (name,), 100) for name in names), 1)


def constant_params(logits, input_dim=2):
    """Linear classifier that outputs ``logits`` for every input."""
    logits = np.asarray(logits, dtype=np.float64)
    arch = Architecture(input_dim, 0, logits.shape[0])
    return ClassifierParams(
        np.zeros((input_dim, 0)), np.zeros(0), np.zeros((input_dim, logits.shape[0])), logits, arch
    )


def keyword_params(name, dim=4096, weight=10.0, bias=(0.0, 0.5)):
    """
    2-class linear model: the unigram ``name`` pushes towards class 0, and
    without it class 1 wins by the bias.
    """
    bucket, sign = hashed_slot(f"u\x1f{name}", dim)
    w2 = np.zeros((dim, 2))
    w2[bucket] = sign * np.array([weight, -weight])
    return ClassifierParams(np.zeros((dim, 0)), np.zeros(0), w2, np.asarray(bias, dtype=np.float64),
                            Architecture(dim, 0, 2))


def train_config(kind="bce", epochs=5, learning_rate=0.1, seed=7, patience=None, **loss):
    return TrainConfig(
        epochs=epochs,
        batch_size=8,
        learning_rate=learning_rate,
        momentum=0.9,
        seed=seed,
        loss=LossSpec(kind, **loss),
        patience=patience,
    )


def small_synthetic_spec(vulnerable_count=30, groups=2):
    tokens = [("memcpy_v1", "strcpy_v1"), ("malloc_v2", "free_v2"), ("atoi_v3", "scanf_v3")]
    return SyntheticSpec(
        groups=tuple(
            SyntheticGroup(f"CWE-{100 + index}", tokens[index], vulnerable_count) for index in range(groups)
        ),
        projects=2,
        noise_tokens=("log_event", "checksum", "normalize", "hash_key"),
        loc_range=(6, 12),
    )


def small_pipeline_config(corpus_path, workdir, attacks=True):
    """A pipeline config that runs end to end in a few seconds."""
    block = {"epochs": 3, "batch_size": 8, "input_dim": 64, "hidden": 4}
    return {
        "corpus": str(corpus_path),
        "workdir": str(workdir),
        "seed": 11,
        "min_count": 5,
        "k": 2,
        "synthetic": {
            "groups": [
                {"name": "CWE-119", "signal_tokens": ["memcpy_v1", "strcpy_v1"], "vulnerable_count": 30},
                {"name": "CWE-399", "signal_tokens": ["malloc_v2", "free_v2"], "vulnerable_count": 30},
            ],
            "projects": 2,
            "noise_tokens": ["log_event", "checksum", "normalize", "hash_key"],
            "loc_range": [6, 12],
        },
        "experts": {**block, "loss": {"kind": "bce"}},
        "router": {**block, "loss": {"kind": "focal", "gamma": 2.0}},
        "baseline_teacher": {**block, "loss": {"kind": "bce"}},
        "student": {"epochs": 3, "batch_size": 8, "patience": 5, "loss": {"kind": "kd", "temperature": 2.0}},
        "student_spec": {"name": "tiny", "input_dim": 32, "hidden": 2},
        "sweep": [{"name": "linear", "input_dim": 64, "hidden": 0}],
        "attacks": (
            [
                {"kind": "wir_random", "candidates": 3},
                {"kind": "mhm", "candidates": 3, "max_iterations": 5},
            ]
            if attacks
            else []
        ),
        "attack_sweep": True,
        "dump_perturbed": True,
    }
