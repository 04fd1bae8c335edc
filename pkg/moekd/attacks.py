"""
Identifier-renaming attacks and Attack Success Rate evaluation.

Both attacks are black-box: they only see class probabilities through a
QueryOracle, which counts every model invocation. Renames are consistent (every
renameable occurrence of a name changes) so the attacked program keeps its
semantics.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError

from .features import (
    C_KEYWORDS,
    Token,
    TokenKind,
    extract_identifiers,
    featurize,
    join_tokens,
    renameable_positions,
    tokenize,
)
from .nn import forward, softmax_t
from .rng import make_rng
from .validators import validate_identifier_grammar

logger = logging.getLogger("moekd")

ATTACK_KINDS = ("wir_random", "mhm")

# Reserved name used to blank out one identifier while measuring its influence.
PLACEHOLDER = "__wir_hole__"

FALLBACK_PREFIX = "id_"

# ============================================================================
# CONFIG AND RESULTS
# ============================================================================


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    candidates: int = 30
    max_iterations: int = 100
    query_budget: int | None = None
    fallback_pool: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValidationError(f"Unknown attack kind {self.kind!r}.", code="invalid")
        if self.candidates < 1:
            raise ValidationError("candidates must be >= 1.", code="invalid")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1.", code="invalid")
        if self.query_budget is not None and self.query_budget < 0:
            raise ValidationError("query_budget must be >= 0.", code="invalid")

    def to_dict(self):
        return {
            "kind": self.kind,
            "candidates": self.candidates,
            "max_iterations": self.max_iterations,
            "query_budget": self.query_budget,
            "fallback_pool": self.fallback_pool,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class AttackResult:
    sample_id: str
    label: int
    success: bool
    renames: tuple  # ((old, new), ...) in first-applied order; no new name is an original one
    queries: int
    original_prediction: int
    final_prediction: int
    perturbed_code: str

    @property
    def rename_map(self):
        return dict(self.renames)

    def to_dict(self, include_code=False):
        data = {
            "id": self.sample_id,
            "success": self.success,
            "renames": self.rename_map,
            "queries": self.queries,
            "original_prediction": self.original_prediction,
            "final_prediction": self.final_prediction,
        }
        if include_code:
            data["label"] = self.label
            data["perturbed_code"] = self.perturbed_code
        return data


@dataclass(frozen=True)
class AsrReport:
    attack: str
    seed: int
    attacked: int
    flipped: int
    skipped: int
    semantic_violations: int = 0
    results: tuple = field(default=(), compare=False)

    @property
    def asr(self):
        """flipped / attacked, or None when nothing could be attacked."""
        return self.flipped / self.attacked if self.attacked else None

    def to_dict(self):
        return {
            "attack": self.attack,
            "seed": self.seed,
            "attacked": self.attacked,
            "flipped": self.flipped,
            "asr": self.asr,
            "skipped": self.skipped,
            "semantic_violations": self.semantic_violations,
            "per_sample": [result.to_dict() for result in self.results],
        }


# ============================================================================
# MODEL ACCESS
# ============================================================================


class TargetModel:
    """Read-only classifier over source code."""

    def __init__(self, params):
        self.params = params
        self.dim = params.arch.input_dim

    def probabilities(self, tokens):
        return softmax_t(forward(self.params, featurize(tokens, self.dim)), 1.0)

    def predict(self, tokens):
        return int(np.argmax(self.probabilities(tokens)))


class QueryOracle:
    """Per-episode query counter around a TargetModel."""

    def __init__(self, model, label):
        self.model = model
        self.label = label
        self.queries = 0

    def query(self, tokens):
        """Returns (p_true, predicted class)."""
        self.queries += 1
        probs = self.model.probabilities(tokens)
        return float(probs[self.label]), int(np.argmax(probs))


# ============================================================================
# RENAMING
# ============================================================================


def _substitute(tokens, old, new):
    renamed = list(tokens)
    for index in renameable_positions(tokens):
        if tokens[index].text == old:
            renamed[index] = Token(new, TokenKind.IDENTIFIER, 0, 0)
    offset = 0
    result = []
    for token in renamed:
        length = len(token.text.encode("utf-8"))
        result.append(Token(token.text, token.kind, offset, length))
        offset += length
    return result


def rename_identifier(tokens, old, new):
    """
    Rename every renameable occurrence of ``old`` to ``new``.

    Field accesses after "." or "->" are left alone; token kinds are unchanged
    and offsets are recomputed.

    Raises:
        ValidationError: ``old`` is not a renameable identifier (code
            "unknown_identifier"), ``new`` breaks the identifier grammar
            ("grammar"), or ``new`` is a keyword or an existing identifier
            ("collision")
    """
    existing = extract_identifiers(tokens)
    if old not in existing:
        raise ValidationError(f"{old!r} is not an identifier of this code.", code="unknown_identifier")
    validate_identifier_grammar(new)
    if new in C_KEYWORDS or new in existing:
        raise ValidationError(f"Renaming {old!r} to {new!r} collides with an existing name.", code="collision")
    return _substitute(tokens, old, new)


def check_rename_only(original_code, result):
    """True when the perturbed code differs from the original only in mapped Identifier tokens."""
    before = tokenize(original_code)
    after = tokenize(result.perturbed_code)
    if [token.kind for token in before] != [token.kind for token in after]:
        return False
    renames = result.rename_map
    for old, new in zip(before, after):
        if old.text == new.text:
            continue
        if old.kind is not TokenKind.IDENTIFIER or renames.get(old.text) != new.text:
            return False
    return True


# ============================================================================
# SUBSTITUTION VOCABULARY
# ============================================================================


def build_substitution_vocabulary(samples, fallback_pool=200):
    """
    Identifiers harvested from ``samples`` plus a generated id_0001... pool.

    Returns a sorted tuple without keywords or the probing placeholder.
    """
    names = set()
    for sample in samples:
        names.update(extract_identifiers(tokenize(sample.code)))
    names.update(f"{FALLBACK_PREFIX}{index:04d}" for index in range(1, fallback_pool + 1))
    names.discard(PLACEHOLDER)
    names.difference_update(C_KEYWORDS)
    return tuple(sorted(names))


def draw_candidates(rng, vocabulary, taken, n):
    """Up to ``n`` distinct vocabulary names not in ``taken``."""
    available = [name for name in vocabulary if name not in taken]
    if not available:
        return []
    picks = rng.choice(len(available), size=min(n, len(available)), replace=False)
    return [available[int(i)] for i in picks]


# ============================================================================
# ATTACKS
# ============================================================================


def _rank(oracle, tokens, identifiers):
    p_original, _ = oracle.query(tokens)
    influence = []
    for name in identifiers:
        p_probe, _ = oracle.query(_substitute(tokens, name, PLACEHOLDER))
        influence.append(abs(p_original - p_probe))
    order = sorted(range(len(identifiers)), key=lambda i: -influence[i])
    return [identifiers[i] for i in order], p_original


def rank_identifiers_by_influence(model, sample, oracle=None):
    """
    Identifiers ordered by how much blanking them moves the true-class probability.

    Ties keep first-occurrence order. Costs one query for the original code
    plus one per identifier.
    """
    tokens = tokenize(sample.code)
    identifiers = extract_identifiers(tokens)
    if not identifiers:
        return []
    oracle = oracle or QueryOracle(model, sample.label)
    ranked, _ = _rank(oracle, tokens, identifiers)
    return ranked


def _require_correct(model, sample, tokens):
    prediction = model.predict(tokens)
    if prediction != sample.label:
        raise ValidationError(
            f"Sample {sample.id} is misclassified before the attack.", code="misclassified"
        )
    return prediction


def _result(sample, oracle, renames, tokens, original_prediction, final_prediction):
    return AttackResult(
        sample_id=sample.id,
        label=sample.label,
        success=final_prediction != sample.label,
        renames=tuple((old, new) for old, new in renames.items() if old != new),
        queries=oracle.queries,
        original_prediction=original_prediction,
        final_prediction=final_prediction,
        perturbed_code=join_tokens(tokens),
    )


def wir_random_attack(model, sample, cfg, vocabulary, rng=None):
    """
    WIR-Random: walk identifiers by influence and try random substitutions.

    A substitution is kept only if it strictly lowers the true-class
    probability. The search stops at the first misclassification or when the
    substitution budget (default |identifiers| * candidates) runs out.

    Raises:
        ValidationError: the sample is misclassified before the attack
    """
    rng = rng if rng is not None else make_rng(cfg.seed, "attack", cfg.kind, sample.id)
    tokens = tokenize(sample.code)
    original_prediction = _require_correct(model, sample, tokens)
    oracle = QueryOracle(model, sample.label)
    identifiers = extract_identifiers(tokens)
    renames = {}
    if not identifiers:
        return _result(sample, oracle, renames, tokens, original_prediction, original_prediction)

    ranked, p_current = _rank(oracle, tokens, identifiers)
    budget = cfg.query_budget if cfg.query_budget is not None else len(identifiers) * cfg.candidates
    spent = 0
    prediction = original_prediction

    for name in ranked:
        if prediction != sample.label or spent >= budget:
            break
        current = renames.get(name, name)
        taken = set(identifiers).union(extract_identifiers(tokens))
        for candidate in draw_candidates(rng, vocabulary, taken, cfg.candidates):
            if spent >= budget:
                break
            trial = rename_identifier(tokens, current, candidate)
            p_trial, trial_prediction = oracle.query(trial)
            spent += 1
            if p_trial < p_current:
                tokens, current, p_current, prediction = trial, candidate, p_trial, trial_prediction
                renames[name] = candidate
                if prediction != sample.label:
                    break

    return _result(sample, oracle, renames, tokens, original_prediction, prediction)


def mhm_acceptance(p_current, p_proposed):
    """min(1, (1 - p') / (1 - p)); lower true-class confidence is always accepted."""
    if p_proposed <= p_current:
        return 1.0
    return min(1.0, (1.0 - p_proposed) / (1.0 - p_current))


def mhm_attack(model, sample, cfg, vocabulary, rng=None):
    """
    Metropolis-Hastings search over renames.

    Each iteration picks a random identifier, scores ``cfg.candidates`` new
    names, proposes the one with the lowest true-class probability and accepts
    it with probability ``mhm_acceptance``. Stops at the first misclassification,
    after ``cfg.max_iterations`` or when ``cfg.query_budget`` is spent.

    Raises:
        ValidationError: the sample is misclassified before the attack
    """
    rng = rng if rng is not None else make_rng(cfg.seed, "attack", cfg.kind, sample.id)
    tokens = tokenize(sample.code)
    original_prediction = _require_correct(model, sample, tokens)
    oracle = QueryOracle(model, sample.label)
    originals = extract_identifiers(tokens)
    renames = {}
    prediction = original_prediction
    if not originals:
        return _result(sample, oracle, {}, tokens, original_prediction, prediction)

    p_current, _ = oracle.query(tokens)
    budget = cfg.query_budget

    for _ in range(cfg.max_iterations):
        if budget is not None and oracle.queries >= budget:
            break
        target = originals[int(rng.integers(len(originals)))]
        current = renames.get(target, target)
        taken = set(originals).union(extract_identifiers(tokens))
        best = None
        for candidate in draw_candidates(rng, vocabulary, taken, cfg.candidates):
            if budget is not None and oracle.queries >= budget:
                break
            trial = rename_identifier(tokens, current, candidate)
            p_trial, trial_prediction = oracle.query(trial)
            if best is None or p_trial < best[0]:
                best = (p_trial, trial_prediction, candidate, trial)
        if best is None:
            continue

        p_best, best_prediction, candidate, trial = best
        if rng.random() < mhm_acceptance(p_current, p_best):
            tokens, p_current, prediction = trial, p_best, best_prediction
            renames[target] = candidate
            if prediction != sample.label:
                break

    return _result(sample, oracle, renames, tokens, original_prediction, prediction)


ATTACKS = {"wir_random": wir_random_attack, "mhm": mhm_attack}


# ============================================================================
# ASR EVALUATION
# ============================================================================


def evaluate_asr(model, test_samples, cfg, vocabulary, workers=1):
    """
    Attack every correctly classified test sample and report the success rate.

    Each sample gets its own random stream (seed, "attack", kind, sample id),
    so the report does not depend on ``workers`` or processing order.

    Args:
        model: TargetModel
        test_samples: labeled CodeSamples
        cfg: AttackConfig
        vocabulary: substitution vocabulary
        workers: threads used for independent episodes

    Returns:
        AsrReport

    Raises:
        ValidationError: empty test set
    """
    test_samples = list(test_samples)
    if not test_samples:
        raise ValidationError("Cannot evaluate ASR on an empty test set.", code="empty")
    attack = ATTACKS[cfg.kind]

    def episode(sample):
        if model.predict(tokenize(sample.code)) != sample.label:
            return None
        return attack(model, sample, cfg, vocabulary, make_rng(cfg.seed, "attack", cfg.kind, sample.id))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(episode, test_samples))
    else:
        outcomes = [episode(sample) for sample in test_samples]

    results = []
    violations = 0
    for sample, result in zip(test_samples, outcomes):
        if result is None:
            continue
        results.append(result)
        if not check_rename_only(sample.code, result):
            violations += 1
    if violations:
        logger.warning(f"{violations} {cfg.kind} results changed more than identifier names")

    report = AsrReport(
        attack=cfg.kind,
        seed=cfg.seed,
        attacked=len(results),
        flipped=sum(result.success for result in results),
        skipped=len(test_samples) - len(results),
        semantic_violations=violations,
        results=tuple(results),
    )
    asr = "undefined" if report.asr is None else f"{report.asr:.4f}"
    logger.info(f"{cfg.kind}: attacked {report.attacked}, flipped {report.flipped}, ASR {asr}")
    return report
