import json
import tempfile
from collections import Counter
from fractions import Fraction
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from moekd.corpus import (
    OTHER_CWE,
    Corpus,
    balance_corpus,
    generate_synthetic,
    group_cwes,
    load_corpus,
    load_splits,
    match_pairs,
    save_corpus,
    save_splits,
    split_corpus,
)
from moekd.features import join_tokens, tokenize

from .factories import make_sample, small_synthetic_spec


class LoadCorpusTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write_lines(self, *records):
        path = self.dir / "corpus.jsonl"
        path.write_text("".join(json.dumps(record) + "\n" for record in records), encoding="utf-8")
        return path

    def record(self, sample_id, label=0, cwe=None):
        return {"id": sample_id, "code": "int f(void) { return 0; }", "label": label,
                "cwe": cwe, "project": "p", "loc": 1}

    def test_preserves_line_order(self):
        path = self.write_lines(self.record("c"), self.record("a"), self.record("b", 1, "CWE-20"))
        corpus = load_corpus(path)
        self.assertEqual([sample.id for sample in corpus], ["c", "a", "b"])
        self.assertEqual(corpus.by_id["b"].cwe, "CWE-20")

    def test_missing_cwe_on_vulnerable_sample_is_unknown(self):
        corpus = load_corpus(self.write_lines(self.record("a", 1)))
        self.assertEqual(corpus.by_id["a"].cwe, "CWE-unknown")

    def test_empty_file_gives_empty_corpus(self):
        path = self.dir / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        self.assertEqual(len(load_corpus(path)), 0)

    def test_duplicate_id_names_both_lines(self):
        path = self.write_lines(
            self.record("x1"), self.record("dup"), self.record("x2"), self.record("x3"), self.record("dup")
        )
        with self.assertRaises(ValidationError) as cm:
            load_corpus(path)
        self.assertEqual(cm.exception.code, "duplicate_id")
        self.assertIn("lines 2 and 5", cm.exception.message)

    def test_malformed_record_names_the_line(self):
        bad = self.record("b")
        del bad["project"]
        path = self.write_lines(self.record("a"), bad)
        with self.assertRaises(ValidationError) as cm:
            load_corpus(path)
        self.assertEqual(cm.exception.code, "malformed_record")
        self.assertIn("line 2", cm.exception.message)

    def test_save_then_load_preserves_samples(self):
        corpus = generate_synthetic(small_synthetic_spec(5), seed=3)
        path = save_corpus(corpus, self.dir / "out.jsonl")
        self.assertEqual(load_corpus(path).samples, corpus.samples)


class BalanceTests(SimpleTestCase):
    def test_closest_in_range_partner_is_chosen(self):
        raw = Corpus((
            make_sample("v", 1, loc=100),
            make_sample("far", 0, loc=79),
            make_sample("near", 0, loc=103),
            make_sample("edge", 0, loc=120),
        ))
        pairs = match_pairs(raw, seed=1)
        self.assertEqual([(p.vulnerable_id, p.benign_id, p.fallback) for p in pairs], [("v", "near", False)])

    def test_range_bounds_are_inclusive(self):
        raw = Corpus((make_sample("v", 1, loc=100), make_sample("low", 0, loc=80)))
        self.assertFalse(match_pairs(raw, seed=1)[0].fallback)

    def test_fallback_when_no_partner_in_range(self):
        raw = Corpus((make_sample("v", 1, loc=100), make_sample("tiny", 0, loc=10)))
        (pair,) = match_pairs(raw, seed=1)
        self.assertEqual(pair.benign_id, "tiny")
        self.assertTrue(pair.fallback)

    def test_project_short_of_benign_samples_is_named(self):
        raw = Corpus((
            make_sample("v1", 1, project="alpha"),
            make_sample("v2", 1, project="alpha"),
            make_sample("b1", 0, project="alpha"),
        ))
        with self.assertRaises(ValidationError) as cm:
            balance_corpus(raw, seed=1)
        self.assertEqual(cm.exception.code, "insufficient_benign")
        self.assertIn("alpha", cm.exception.message)

    def test_balanced_corpus_has_equal_classes(self):
        raw = generate_synthetic(small_synthetic_spec(20), seed=5)
        balanced = balance_corpus(raw, seed=5)
        labels = Counter(sample.label for sample in balanced)
        self.assertEqual(labels[0], labels[1])
        self.assertEqual(labels[1], 40)
        self.assertEqual(balance_corpus(raw, seed=5).samples, balanced.samples)

    def random_corpus(self, rng):
        samples = []
        for project in range(int(rng.integers(1, 4))):
            vulnerable = int(rng.integers(0, 8))
            benign = vulnerable + int(rng.integers(0, 5))
            for index in range(vulnerable + benign):
                label = int(index < vulnerable)
                samples.append(make_sample(f"p{project}-{index}", label, project=f"p{project}",
                                           loc=int(rng.integers(1, 31))))
        order = rng.permutation(len(samples))
        return Corpus(tuple(samples[int(i)] for i in order))

    def test_matches_brute_force_greedy(self):
        rng = np.random.default_rng(11)
        for trial in range(40):
            raw = self.random_corpus(rng)
            position = {sample.id: index for index, sample in enumerate(raw)}
            pairs = match_pairs(raw, seed=trial)
            self.assertEqual([pair.vulnerable_id for pair in pairs], [s.id for s in raw if s.is_vulnerable])

            used = set()
            for pair in pairs:
                vulnerable = raw.by_id[pair.vulnerable_id]
                unused = [s for s in raw if not s.is_vulnerable and s.project == vulnerable.project
                          and s.id not in used]
                in_range = [s for s in unused
                            if Fraction(4, 5) * vulnerable.loc <= s.loc <= Fraction(6, 5) * vulnerable.loc]
                self.assertEqual(pair.fallback, not in_range, (trial, pair))
                self.assertIn(pair.benign_id, {s.id for s in unused})
                if in_range:
                    best = min(in_range, key=lambda s: (abs(s.loc - vulnerable.loc), position[s.id]))
                    self.assertEqual(pair.benign_id, best.id, (trial, pair))
                used.add(pair.benign_id)


class GroupingTests(SimpleTestCase):
    def corpus(self, counts):
        samples = []
        for tag, count in counts.items():
            for index in range(count):
                samples.append(make_sample(f"{tag}-{index}", 1, cwe=tag))
        samples.append(make_sample("benign", 0))
        return Corpus(tuple(samples))

    def test_threshold_is_inclusive(self):
        grouping = group_cwes(self.corpus({"CWE-119": 3, "CWE-20": 2, "CWE-787": 1}), min_count=2)
        self.assertEqual(grouping.names, ["CWE-119", "CWE-20", OTHER_CWE])
        self.assertEqual(grouping.group_of("CWE-787"), OTHER_CWE)
        self.assertEqual(grouping.group_of("CWE-999"), OTHER_CWE)

    def test_everything_below_threshold(self):
        corpus = self.corpus({"CWE-unknown": 1, "CWE-20": 2, "CWE-787": 1})
        grouping = group_cwes(corpus, min_count=100)
        self.assertEqual(grouping.names, [OTHER_CWE, "CWE-unknown"])
        self.assertEqual(grouping.group_of(None), "CWE-unknown")

    def test_no_vulnerable_samples(self):
        with self.assertRaises(ValidationError) as cm:
            group_cwes(Corpus((make_sample("a", 0),)), min_count=1)
        self.assertEqual(cm.exception.code, "no_vulnerable")

    def test_ordering_by_count_then_name(self):
        grouping = group_cwes(self.corpus({"CWE-b": 2, "CWE-a": 2, "CWE-c": 5}), min_count=2)
        self.assertEqual(grouping.names, ["CWE-c", "CWE-a", "CWE-b"])

    def test_every_tag_lands_in_exactly_one_group(self):
        rng = np.random.default_rng(3)
        tags = [f"CWE-{number}" for number in range(1, 12)] + ["CWE-unknown"]
        for trial in range(30):
            counts = {tag: int(rng.integers(1, 15)) for tag in tags if rng.random() < 0.6}
            if not counts:
                continue
            grouping = group_cwes(self.corpus(counts), min_count=int(rng.integers(1, 12)))
            members = [member for group in grouping.groups for member in group.members]
            self.assertEqual(sorted(members), sorted(counts), trial)
            self.assertEqual(sum(group.sample_count for group in grouping.groups), sum(counts.values()))


class SplitTests(SimpleTestCase):
    def corpus(self, n):
        return Corpus(tuple(make_sample(f"s{index}") for index in range(n)))

    def test_sizes(self):
        for n, expected in ((1000, (400, 400, 100, 100)), (1001, (401, 400, 100, 100)), (10, (4, 4, 1, 1))):
            splits = split_corpus(self.corpus(n), seed=9)
            sizes = tuple(len(part) for part in (splits.expert_train, splits.distill_train, splits.valid, splits.test))
            self.assertEqual(sizes, expected, n)

    def test_partition_is_disjoint_and_complete(self):
        splits = split_corpus(self.corpus(57), seed=2)
        ids = splits.expert_train + splits.distill_train + splits.valid + splits.test
        self.assertEqual(sorted(ids), sorted(f"s{index}" for index in range(57)))

    def test_sizes_for_random_lengths(self):
        for n in np.random.default_rng(8).integers(10, 401, size=50):
            n = int(n)
            splits = split_corpus(self.corpus(n), seed=n)
            train = n - 2 * (n // 10)
            self.assertEqual((len(splits.valid), len(splits.test)), (n // 10, n // 10), n)
            self.assertEqual((len(splits.expert_train), len(splits.distill_train)),
                             ((train + 1) // 2, train // 2), n)
            ids = splits.expert_train + splits.distill_train + splits.valid + splits.test
            self.assertEqual(len(set(ids)), n)

    def test_seeded(self):
        corpus = self.corpus(100)
        self.assertEqual(split_corpus(corpus, 1), split_corpus(corpus, 1))
        self.assertNotEqual(split_corpus(corpus, 1), split_corpus(corpus, 2))

    def test_too_small(self):
        with self.assertRaises(ValidationError) as cm:
            split_corpus(self.corpus(9), seed=1)
        self.assertEqual(cm.exception.code, "too_small")

    def test_saved_splits_reload(self):
        splits = split_corpus(self.corpus(30), seed=4)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_splits(splits, Path(tmp) / "splits.json")
            self.assertEqual(load_splits(path), splits)


class SyntheticTests(SimpleTestCase):
    def setUp(self):
        self.spec = small_synthetic_spec(15, groups=3)
        self.corpus = generate_synthetic(self.spec, seed=21)

    def test_deterministic(self):
        self.assertEqual(generate_synthetic(self.spec, seed=21).samples, self.corpus.samples)

    def test_signals_only_in_their_group(self):
        owner = {token: group.name for group in self.spec.groups for token in group.signal_tokens}
        for sample in self.corpus:
            names = {token.text for token in tokenize(sample.code)}
            planted = {owner[name] for name in names if name in owner}
            if sample.is_vulnerable:
                self.assertEqual(planted, {sample.cwe}, sample.id)
            else:
                self.assertEqual(planted, set(), sample.id)

    def test_generated_code_tokenizes_losslessly(self):
        for seed in (1, 2, 3):
            for sample in generate_synthetic(self.spec, seed=seed):
                self.assertEqual(join_tokens(tokenize(sample.code)), sample.code, sample.id)

    def test_loc_matches_code(self):
        for sample in self.corpus:
            self.assertEqual(sample.code.count("\n") + 1, sample.loc)
            self.assertTrue(self.spec.loc_range[0] <= sample.loc <= self.spec.loc_range[1])

    def test_counts(self):
        labels = Counter(sample.label for sample in self.corpus)
        self.assertEqual(labels[1], 45)
        self.assertEqual(labels[0], 45)
