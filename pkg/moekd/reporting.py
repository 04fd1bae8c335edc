"""
Plain-text and JSON reports over a finished workdir.

Everything here is a pure function of the metrics files: the same artifacts
always render the same bytes.
"""

import logging

from django.core.exceptions import ValidationError
from django.template.loader import render_to_string

from .artifacts import read_json
from .stats import compare

logger = logging.getLogger("moekd")

# (stage, metrics file) pairs the report reads.
REQUIRED_METRICS = (
    ("train-experts", "metrics/experts.json"),
    ("train-router", "metrics/router.json"),
    ("fuse", "metrics/fuse.json"),
    ("distill", "metrics/distill.json"),
    ("eval", "metrics/eval.json"),
    ("attack", "metrics/attack.json"),
)

MOE_METHOD = "MoEKD"
SINGLE_METHOD = "Single-teacher KD"


def load_metrics(workdir):
    """
    Read every metrics file the report needs.

    Raises:
        ValidationError: listing each missing artifact with the stage that writes it
    """
    missing = [f"{path} (stage {stage})" for stage, path in REQUIRED_METRICS if not (workdir / path).is_file()]
    if missing:
        raise ValidationError(f"Missing pipeline artifacts: {', '.join(missing)}", code="missing_stage")
    return {stage: read_json(workdir / path) for stage, path in REQUIRED_METRICS}


def fmt(value, digits=4):
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


# ============================================================================
# COMPARISON
# ============================================================================


def paired_asr(attack_rows):
    """(cell labels, MoE ASRs, single-teacher ASRs) over (attack, student) cells where both are defined."""
    cells = {}
    for row in attack_rows:
        cells.setdefault((row["attack"], row["student"]), {})[row["method"]] = row["asr"]
    labels, moe, single = [], [], []
    for (attack, student), values in sorted(cells.items()):
        if values.get(MOE_METHOD) is None or values.get(SINGLE_METHOD) is None:
            continue
        labels.append(f"{attack}/{student}")
        moe.append(values[MOE_METHOD])
        single.append(values[SINGLE_METHOD])
    return labels, moe, single


def comparison_from_rows(attack_rows):
    labels, moe, single = paired_asr(attack_rows)
    if not labels:
        return {
            "methods": [MOE_METHOD, SINGLE_METHOD],
            "pairs": [],
            "wilcoxon_p": None,
            "cliffs_delta": None,
            "effect": None,
            "note": "insufficient pairs",
        }
    report = compare(MOE_METHOD, moe, SINGLE_METHOD, single)
    return {**report.to_dict(), "pairs": labels}


def asr_comparison(workdir):
    """MoEKD vs single-teacher ASR over every attacked (attack, student size) cell."""
    attack_path = workdir / "metrics" / "attack.json"
    if not attack_path.is_file():
        raise ValidationError(f"Missing pipeline artifacts: {attack_path} (stage attack)", code="missing_stage")
    return comparison_from_rows(read_json(attack_path)["rows"])


# ============================================================================
# REPORT
# ============================================================================


def build_summary(metrics):
    evaluation = metrics["eval"]
    attacks = metrics["attack"]["rows"]
    primary = evaluation["primary_student"]

    students = evaluation["students"]
    rq1 = evaluation["teachers"] + [
        {"method": row["method"], "model": f"Student {row['student']}", "accuracy": row["accuracy"]}
        for row in students
        if row["student"] == primary
    ]
    rq2 = [row for row in attacks if row["student"] == primary]
    rq3 = [
        {
            "method": row["method"],
            "size": row["student"],
            "parameters": row["parameters"],
            "checkpoint_mb": row["checkpoint_mb"],
            "accuracy": row["accuracy"],
        }
        for row in students
    ]
    agreement = [
        {"method": row["method"], "student": row["student"], "agreement": row["agreement"]}
        for row in metrics["distill"]["students"]
    ]
    return {
        "rq1_accuracy": rq1,
        "rq2_asr": rq2,
        "rq3_capacity": rq3,
        "rq3_robustness": [row for row in attacks if row["student"] != primary],
        "experts": [
            {**train_row, **held_out_row}
            for train_row, held_out_row in zip(metrics["train-experts"]["experts"], evaluation["experts"])
        ],
        "router": {
            "groups": metrics["train-router"]["groups"],
            "train_accuracy": metrics["train-router"]["train_accuracy"],
            "heldout_accuracy": evaluation["router_heldout_accuracy"],
        },
        "teacher_cost": metrics["fuse"],
        "agreement": agreement,
        "semantic_violations": sum(row["semantic_violations"] for row in attacks),
        "comparison": comparison_from_rows(attacks),
    }


def _text_rows(rows, keys):
    return [{key: fmt(row.get(key)) for key in keys} for row in rows]


def render_text(summary):
    cost = summary["teacher_cost"]
    comparison = summary["comparison"]
    context = {
        "rq1": _text_rows(summary["rq1_accuracy"], ("method", "model", "accuracy")),
        "rq2": _text_rows(summary["rq2_asr"], ("method", "attack", "attacked", "flipped", "asr")),
        "rq3": _text_rows(summary["rq3_capacity"], ("method", "size", "parameters", "checkpoint_mb", "accuracy")),
        "rq3_robustness": _text_rows(summary["rq3_robustness"], ("method", "student", "attack", "asr")),
        "experts": _text_rows(
            summary["experts"], ("group", "positives", "train_subspace_accuracy", "heldout_subspace_accuracy")
        ),
        "router": {key: fmt(value) for key, value in summary["router"].items() if key != "groups"},
        "agreement": _text_rows(summary["agreement"], ("method", "student", "agreement")),
        "cost": {key: fmt(value) for key, value in cost.items()},
        "comparison": {
            "pairs": len(comparison["pairs"]),
            "p_value": fmt(comparison["wilcoxon_p"]),
            "delta": fmt(comparison["cliffs_delta"]),
            "effect": fmt(comparison["effect"]),
            "note": comparison["note"],
        },
        "semantic_violations": summary["semantic_violations"],
    }
    return render_to_string("moekd/report.txt", context)


def build_report(workdir):
    """
    Summary dict and rendered text for a finished workdir.

    Raises:
        ValidationError: a required stage artifact is missing
    """
    summary = build_summary(load_metrics(workdir))
    logger.info(f"Report built from {workdir}")
    return summary, render_text(summary)
