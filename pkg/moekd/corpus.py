"""
Corpus ingestion, class balancing, CWE grouping, splitting and the synthetic
desk-scale benchmark generator.
"""

import bisect
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from functools import cached_property

from django.core.exceptions import ValidationError

from .artifacts import iter_jsonl, read_json, write_json, write_jsonl
from .features import C_KEYWORDS
from .rng import make_rng
from .serializers import (
    UNKNOWN_CWE,
    CodeSampleSerializer,
    SplitsSerializer,
)
from .validators import validate_identifier_grammar

logger = logging.getLogger("moekd")

VULNERABLE = 1
NON_VULNERABLE = 0
OTHER_CWE = "CWE-other"

# ============================================================================
# DOMAIN TYPES
# ============================================================================


@dataclass(frozen=True)
class CodeSample:
    """One labeled function."""

    id: str
    code: str
    label: int
    cwe: str | None
    project: str
    loc: int

    @property
    def is_vulnerable(self):
        return self.label == VULNERABLE


@dataclass(frozen=True)
class Corpus:
    samples: tuple
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        counts = Counter(sample.id for sample in self.samples)
        duplicates = sorted(sample_id for sample_id, count in counts.items() if count > 1)
        if duplicates:
            raise ValidationError(
                f"Duplicate sample ids: {', '.join(duplicates[:5])}", code="duplicate_id"
            )

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @cached_property
    def by_id(self):
        return {sample.id: sample for sample in self.samples}

    def subset(self, sample_ids, provenance=None):
        """Samples for ``sample_ids``, in that order."""
        return Corpus(
            tuple(self.by_id[sample_id] for sample_id in sample_ids),
            provenance if provenance is not None else self.provenance,
        )

    @property
    def vulnerable(self):
        return [sample for sample in self.samples if sample.is_vulnerable]


def normalize_cwe(tag):
    """Absent tags and the literal "CWE-unknown" share one group."""
    return UNKNOWN_CWE if tag is None or tag == UNKNOWN_CWE else tag


# ============================================================================
# LOADING AND SAVING
# ============================================================================


def load_corpus(path):
    """
    Read a JSONL corpus, preserving line order.

    Args:
        path: pathlib.Path to a UTF-8 JSONL file

    Returns:
        Corpus

    Raises:
        ValidationError: malformed record (names the line number) or a
            duplicate id (names both lines)
    """
    samples = []
    first_seen = {}
    for line_number, record in iter_jsonl(path):
        serializer = CodeSampleSerializer(data=record)
        if not serializer.is_valid():
            raise ValidationError(
                f"{path.name} line {line_number}: invalid record {dict(serializer.errors)}",
                code="malformed_record",
            )
        sample = serializer.save()
        if sample.id in first_seen:
            raise ValidationError(
                f"Duplicate id {sample.id!r} on lines {first_seen[sample.id]} and {line_number}.",
                code="duplicate_id",
            )
        first_seen[sample.id] = line_number
        samples.append(sample)

    logger.info(f"Loaded {len(samples)} samples from {path}")
    return Corpus(tuple(samples), provenance=f"jsonl:{path.name}")


def save_corpus(corpus, path):
    return write_jsonl(path, [CodeSampleSerializer(sample).data for sample in corpus])


# ============================================================================
# BALANCING
# ============================================================================


@dataclass(frozen=True)
class MatchedPair:
    vulnerable_id: str
    benign_id: str
    fallback: bool


def match_pairs(raw, seed):
    """
    Pair each vulnerable sample with one unused non-vulnerable sample of its project.

    Greedy in corpus order. Among in-range candidates the closest loc wins, ties
    going to the earlier corpus position. With no in-range candidate, a uniformly
    random unused sample of the project is taken and the pair is flagged.
    """
    vulnerable_per_project = Counter(sample.project for sample in raw if sample.is_vulnerable)
    pools = defaultdict(list)
    for order, sample in enumerate(raw):
        if not sample.is_vulnerable:
            pools[sample.project].append((sample.loc, order, sample))

    for project, needed in sorted(vulnerable_per_project.items()):
        available = len(pools.get(project, ()))
        if available < needed:
            raise ValidationError(
                f"Project {project!r} has {available} non-vulnerable samples "
                f"for {needed} vulnerable ones.",
                code="insufficient_benign",
            )
    for pool in pools.values():
        pool.sort(key=lambda entry: (entry[0], entry[1]))

    rng = make_rng(seed, "balance", "fallback")
    pairs = []
    for sample in raw:
        if not sample.is_vulnerable:
            continue
        pool = pools[sample.project]
        # ceil(0.8 v) and floor(1.2 v) in integers
        min_loc = (4 * sample.loc + 4) // 5
        max_loc = (6 * sample.loc) // 5
        lo = bisect.bisect_left(pool, min_loc, key=lambda entry: entry[0])
        hi = bisect.bisect_right(pool, max_loc, key=lambda entry: entry[0])
        if lo < hi:
            index = min(range(lo, hi), key=lambda i: (abs(pool[i][0] - sample.loc), pool[i][1]))
            fallback = False
        else:
            index = int(rng.integers(len(pool)))
            fallback = True
        _, _, partner = pool.pop(index)
        pairs.append(MatchedPair(sample.id, partner.id, fallback))
    return pairs


def balance_corpus(raw, seed):
    """
    Keep every vulnerable sample, add one length-matched partner each, shuffle.

    Raises:
        ValidationError: a project has fewer non-vulnerable than vulnerable samples
    """
    pairs = match_pairs(raw, seed)
    fallbacks = sum(pair.fallback for pair in pairs)
    if fallbacks:
        logger.warning(f"{fallbacks} of {len(pairs)} vulnerable samples matched without a length-matched partner")

    chosen = [raw.by_id[pair.vulnerable_id] for pair in pairs]
    chosen += [raw.by_id[pair.benign_id] for pair in pairs]
    order = make_rng(seed, "balance", "shuffle").permutation(len(chosen))
    return Corpus(
        tuple(chosen[int(i)] for i in order),
        provenance=f"balanced({raw.provenance}; seed={seed}; fallback={fallbacks})",
    )


# ============================================================================
# CWE GROUPING
# ============================================================================


@dataclass(frozen=True)
class CweGroup:
    name: str
    members: tuple
    sample_count: int


@dataclass(frozen=True)
class CweGrouping:
    groups: tuple
    min_count: int

    @property
    def names(self):
        return [group.name for group in self.groups]

    @cached_property
    def _tag_index(self):
        return {tag: index for index, group in enumerate(self.groups) for tag in group.members}

    def index_of(self, tag):
        """Group index of a raw tag; tags never seen fall into CWE-other when it exists."""
        tag = normalize_cwe(tag)
        if tag in self._tag_index:
            return self._tag_index[tag]
        if OTHER_CWE in self.names and tag != UNKNOWN_CWE:
            return self.names.index(OTHER_CWE)
        return None

    def group_of(self, tag):
        index = self.index_of(tag)
        return None if index is None else self.groups[index].name

    def to_dict(self):
        return {
            "min_count": self.min_count,
            "groups": [
                {"name": group.name, "members": list(group.members), "sample_count": group.sample_count}
                for group in self.groups
            ],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            tuple(CweGroup(g["name"], tuple(g["members"]), g["sample_count"]) for g in data["groups"]),
            data["min_count"],
        )


def group_cwes(corpus, min_count=100):
    """
    Partition raw CWE tags into expert subspaces.

    Tags with at least ``min_count`` vulnerable samples keep their own group,
    CWE-unknown is always its own group, everything else merges into CWE-other.
    Groups are ordered by descending sample count, ties by name.

    Raises:
        ValidationError: the corpus has no vulnerable samples
    """
    if min_count < 1:
        raise ValidationError("min_count must be positive.", code="invalid")
    counts = Counter(normalize_cwe(sample.cwe) for sample in corpus if sample.is_vulnerable)
    if not counts:
        raise ValidationError("Cannot group CWEs: corpus has no vulnerable samples.", code="no_vulnerable")

    groups = []
    other_members = []
    for tag, count in counts.items():
        if tag == UNKNOWN_CWE or (count >= min_count and tag != OTHER_CWE):
            groups.append(CweGroup(tag, (tag,), count))
        else:
            other_members.append(tag)
    if other_members:
        groups.append(
            CweGroup(OTHER_CWE, tuple(sorted(other_members)), sum(counts[tag] for tag in other_members))
        )

    groups.sort(key=lambda group: (-group.sample_count, group.name))
    logger.info(f"Grouped {len(counts)} CWE tags into {len(groups)} subspaces (min_count={min_count})")
    return CweGrouping(tuple(groups), min_count)


def save_grouping(grouping, path):
    return write_json(path, grouping.to_dict())


def load_grouping(path):
    return CweGrouping.from_dict(read_json(path))


# ============================================================================
# SPLITTING
# ============================================================================


@dataclass(frozen=True)
class Splits:
    expert_train: tuple
    distill_train: tuple
    valid: tuple
    test: tuple

    def to_dict(self):
        return {
            "expert_train": list(self.expert_train),
            "distill_train": list(self.distill_train),
            "valid": list(self.valid),
            "test": list(self.test),
        }


def split_corpus(corpus, seed):
    """
    Seeded 80/10/10 split, training half-and-half into expert and distill sets.

    valid and test hold floor(0.1 N) each; expert_train gets the ceiling half of
    the remainder.

    Raises:
        ValidationError: fewer than 10 samples
    """
    n = len(corpus)
    if n < 10:
        raise ValidationError(f"Need at least 10 samples to split, got {n}.", code="too_small")

    order = make_rng(seed, "split").permutation(n)
    ids = [corpus.samples[int(i)].id for i in order]
    n_eval = n // 10
    valid, test, train = ids[:n_eval], ids[n_eval:2 * n_eval], ids[2 * n_eval:]
    n_expert = (len(train) + 1) // 2
    return Splits(tuple(train[:n_expert]), tuple(train[n_expert:]), tuple(valid), tuple(test))


def save_splits(splits, path):
    return write_json(path, splits.to_dict())


def load_splits(path):
    serializer = SplitsSerializer(data=read_json(path))
    if not serializer.is_valid():
        raise ValidationError(f"{path.name}: invalid splits {dict(serializer.errors)}", code="malformed_record")
    return serializer.save()


# ============================================================================
# SYNTHETIC BENCHMARK
# ============================================================================


@dataclass(frozen=True)
class SyntheticGroup:
    name: str
    signal_tokens: tuple
    vulnerable_count: int


@dataclass(frozen=True)
class SyntheticSpec:
    groups: tuple
    projects: int
    noise_tokens: tuple
    loc_range: tuple
    benign_per_vulnerable: int = 1
    signals_per_sample: int = 2

    def __post_init__(self):
        if len(self.groups) < 2:
            raise ValidationError("A synthetic spec needs at least two CWE groups.", code="invalid")
        names = [group.name for group in self.groups]
        if len(set(names)) != len(names):
            raise ValidationError("Synthetic group names must be unique.", code="invalid")
        low, high = self.loc_range
        if not 4 <= low <= high:
            raise ValidationError("loc_range must satisfy 4 <= min <= max.", code="invalid")

        owner = {}
        for group in self.groups:
            for token in group.signal_tokens:
                self._check_token(token)
                if token in owner and owner[token] != group.name:
                    raise ValidationError(
                        f"Signal token {token!r} is shared by {owner[token]} and {group.name}.",
                        code="overlapping_signals",
                    )
                owner[token] = group.name
        for token in self.noise_tokens:
            self._check_token(token)
            if token in owner:
                raise ValidationError(
                    f"Noise token {token!r} is also a signal of {owner[token]}.",
                    code="overlapping_signals",
                )

    @staticmethod
    def _check_token(token):
        validate_identifier_grammar(token)
        if token in C_KEYWORDS or token in _TEMPLATE_NAMES:
            raise ValidationError(f"{token!r} is reserved by the generator.", code="invalid")


_TEMPLATE_NAMES = frozenset({"buf", "len", "n"})

_NOISE_TEMPLATES = (
    "    {a}(buf, len);",
    "    len = {a}(len, {n});",
    "    if (len > {n}) {{ {a}(buf, {n}); }}",
    "    buf[{n}] = (char){a}(len);",
    "    for (int n = 0; n < {n}; n++) {{ len += {a}(n); }}",
)
_SIGNAL_TEMPLATES = (
    "    {s}(buf, len);",
    "    {s}(buf, buf + {n}, len);",
    "    len = {s}(buf, {n});",
)


def _render_function(rng, name, noise_tokens, signal_tokens, loc, signals_per_sample):
    body_count = loc - 3
    body = []
    for _ in range(body_count):
        template = _NOISE_TEMPLATES[int(rng.integers(len(_NOISE_TEMPLATES)))]
        token = noise_tokens[int(rng.integers(len(noise_tokens)))]
        body.append(template.format(a=token, n=int(rng.integers(1, 64))))

    if signal_tokens:
        count = max(1, min(signals_per_sample, body_count))
        slots = rng.choice(body_count, size=count, replace=False)
        for slot in sorted(int(s) for s in slots):
            template = _SIGNAL_TEMPLATES[int(rng.integers(len(_SIGNAL_TEMPLATES)))]
            token = signal_tokens[int(rng.integers(len(signal_tokens)))]
            body[slot] = template.format(s=token, n=int(rng.integers(1, 64)))

    lines = [f"int {name}(char *buf, int len) {{", *body, "    return len;", "}"]
    return "\n".join(lines)


def generate_synthetic(spec, seed):
    """
    Emit a C-like corpus with planted, group-specific signal calls.

    Vulnerable samples of a group call at least one of its signal tokens;
    non-vulnerable samples use noise tokens only and are generated next to a
    vulnerable sample of the same project with a loc within 10% of it.
    """
    rng = make_rng(seed, "synthetic")
    low, high = spec.loc_range
    projects = [f"proj-{index:02d}" for index in range(spec.projects)]
    samples = []

    def next_id():
        return f"syn-{len(samples) + 1:06d}"

    for group in spec.groups:
        for _ in range(group.vulnerable_count):
            project = projects[int(rng.integers(len(projects)))]
            loc = int(rng.integers(low, high + 1))
            sample_id = next_id()
            code = _render_function(
                rng, f"fn_{len(samples) + 1:06d}", spec.noise_tokens, group.signal_tokens,
                loc, spec.signals_per_sample,
            )
            samples.append(CodeSample(sample_id, code, VULNERABLE, group.name, project, loc))

            for _ in range(spec.benign_per_vulnerable):
                spread = max(1, loc // 10)
                benign_loc = min(high, max(low, loc + int(rng.integers(-spread, spread + 1))))
                sample_id = next_id()
                code = _render_function(
                    rng, f"fn_{len(samples) + 1:06d}", spec.noise_tokens, (), benign_loc, 0,
                )
                samples.append(CodeSample(sample_id, code, NON_VULNERABLE, None, project, benign_loc))

    logger.info(f"Generated synthetic corpus: {len(samples)} samples, {len(spec.groups)} groups")
    return Corpus(tuple(samples), provenance=f"synthetic(seed={seed})")
