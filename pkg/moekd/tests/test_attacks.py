from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from moekd.attacks import (
    PLACEHOLDER,
    AttackConfig,
    QueryOracle,
    TargetModel,
    build_substitution_vocabulary,
    check_rename_only,
    evaluate_asr,
    mhm_acceptance,
    mhm_attack,
    rank_identifiers_by_influence,
    rename_identifier,
    wir_random_attack,
)
from moekd.features import extract_identifiers, join_tokens, tokenize
from moekd.nn import Architecture, zero_params

from .factories import keyword_params, make_sample

WIDE = 1 << 16

FIELD_CODE = "int copy(struct pkt *p, int off) { int sig = p->off + off; return sig; }"


def keyed_sample(sample_id, label=0):
    """A function whose only weighted feature is the identifier ``secret``."""
    return make_sample(sample_id, label, code=f"int {sample_id}(int secret) {{ return secret; }}")


def plain_sample(sample_id, label=1):
    return make_sample(sample_id, label, code=f"int {sample_id}(int a) {{ return a; }}")


class RenameTests(SimpleTestCase):
    def test_field_accesses_are_left_alone(self):
        renamed = rename_identifier(tokenize(FIELD_CODE), "off", "addr")
        self.assertEqual(
            join_tokens(renamed),
            "int copy(struct pkt *p, int addr) { int sig = p->off + addr; return sig; }",
        )
        self.assertEqual([t.kind for t in renamed], [t.kind for t in tokenize(FIELD_CODE)])

    def test_offsets_are_recomputed(self):
        renamed = rename_identifier(tokenize(FIELD_CODE), "p", "packet")
        for previous, token in zip(renamed, renamed[1:]):
            self.assertEqual(previous.offset + previous.length, token.offset)

    def test_rename_back_restores_source(self):
        tokens = tokenize(FIELD_CODE)
        there = rename_identifier(tokens, "off", "addr")
        self.assertEqual(join_tokens(rename_identifier(there, "addr", "off")), FIELD_CODE)

    def test_rejections(self):
        tokens = tokenize(FIELD_CODE)
        for old, new, code in (
            ("off", "sig", "collision"),
            ("off", "while", "collision"),
            ("off", "1abc", "grammar"),
            ("nope", "fresh", "unknown_identifier"),
            ("int", "fresh", "unknown_identifier"),
        ):
            with self.subTest(old=old, new=new):
                with self.assertRaises(ValidationError) as cm:
                    rename_identifier(tokens, old, new)
                self.assertEqual(cm.exception.code, code)

    def test_vocabulary(self):
        vocabulary = build_substitution_vocabulary([make_sample("a", code=FIELD_CODE)], fallback_pool=20)
        self.assertIn("sig", vocabulary)
        self.assertIn("id_0001", vocabulary)
        self.assertIn("id_0020", vocabulary)
        self.assertNotIn("id_0021", vocabulary)
        self.assertNotIn("int", vocabulary)
        self.assertNotIn(PLACEHOLDER, vocabulary)
        self.assertEqual(list(vocabulary), sorted(vocabulary))


class RankingTests(SimpleTestCase):
    def test_one_query_per_identifier_plus_one(self):
        sample = make_sample("s", code="int f(int a, int b) { return a + b; }")
        model = TargetModel(zero_params(Architecture(256, 0, 2)))
        oracle = QueryOracle(model, 0)
        ranked = rank_identifiers_by_influence(model, sample, oracle)
        self.assertEqual(oracle.queries, 4)
        self.assertEqual(ranked, ["f", "a", "b"])

    def test_planted_identifier_ranks_first(self):
        sample = make_sample("s", code="int f(int a, int secret, int b) { return a + secret + b; }")
        model = TargetModel(keyword_params("secret", dim=WIDE))
        self.assertEqual(rank_identifiers_by_influence(model, sample)[0], "secret")


class WirRandomTests(SimpleTestCase):
    def setUp(self):
        self.model = TargetModel(keyword_params("secret", dim=WIDE))
        self.sample = keyed_sample("f")

    def test_flips_with_one_rename(self):
        cfg = AttackConfig("wir_random", candidates=1)
        result = wir_random_attack(self.model, self.sample, cfg, ("other_name",))
        self.assertTrue(result.success)
        self.assertEqual(result.renames, (("secret", "other_name"),))
        self.assertEqual(result.queries, 4)
        self.assertEqual(result.final_prediction, 1)
        self.assertTrue(check_rename_only(self.sample.code, result))

    def test_zero_budget_spends_only_ranking_queries(self):
        cfg = AttackConfig("wir_random", candidates=5, query_budget=0)
        result = wir_random_attack(self.model, self.sample, cfg, ("other_name", "more"))
        self.assertFalse(result.success)
        self.assertEqual(result.renames, ())
        self.assertEqual(result.queries, 3)
        self.assertEqual(result.perturbed_code, self.sample.code)

    def test_invariant_model_is_never_fooled(self):
        model = TargetModel(zero_params(Architecture(64, 0, 2)))
        sample = make_sample("s", 0, code="int f(int a, int b) { return a + b; }")
        cfg = AttackConfig("wir_random", candidates=4)
        result = wir_random_attack(model, sample, cfg, build_substitution_vocabulary([], fallback_pool=50))
        self.assertFalse(result.success)
        self.assertEqual(result.renames, ())
        self.assertEqual(result.queries, 4 + 3 * 4)

    def test_misclassified_sample_is_rejected(self):
        with self.assertRaises(ValidationError) as cm:
            wir_random_attack(self.model, keyed_sample("f", label=1), AttackConfig("wir_random"), ("x",))
        self.assertEqual(cm.exception.code, "misclassified")

    def test_same_seed_same_episode(self):
        cfg = AttackConfig("wir_random", candidates=3, seed=5)
        vocabulary = build_substitution_vocabulary([], fallback_pool=30)
        self.assertEqual(
            wir_random_attack(self.model, self.sample, cfg, vocabulary),
            wir_random_attack(self.model, self.sample, cfg, vocabulary),
        )


class MhmTests(SimpleTestCase):
    def test_acceptance(self):
        self.assertEqual(mhm_acceptance(0.6, 0.4), 1.0)
        self.assertEqual(mhm_acceptance(0.6, 0.6), 1.0)
        self.assertAlmostEqual(mhm_acceptance(0.4, 0.6), 0.4 / 0.6)

    def test_finds_the_planted_identifier(self):
        model = TargetModel(keyword_params("secret", dim=WIDE))
        sample = keyed_sample("f")
        cfg = AttackConfig("mhm", candidates=2, max_iterations=100, seed=3)
        result = mhm_attack(model, sample, cfg, ("other_name", "another_name"))
        self.assertTrue(result.success)
        self.assertIn("secret", result.rename_map)
        self.assertNotIn("secret", extract_identifiers(tokenize(result.perturbed_code)))
        self.assertTrue(check_rename_only(sample.code, result))
        self.assertLessEqual(result.queries, 1 + 100 * 2)

    def test_query_budget_is_respected(self):
        model = TargetModel(zero_params(Architecture(64, 0, 2)))
        sample = make_sample("s", 0, code="int f(int a, int b) { return a + b; }")
        cfg = AttackConfig("mhm", candidates=3, max_iterations=50, query_budget=10)
        result = mhm_attack(model, sample, cfg, build_substitution_vocabulary([], fallback_pool=50))
        self.assertLessEqual(result.queries, 10)
        self.assertFalse(result.success)

    def test_repeated_renames_never_reuse_an_original_name(self):
        # a zero model accepts every proposal, so identifiers get renamed again and again
        model = TargetModel(zero_params(Architecture(64, 0, 2)))
        sample = make_sample("s", 0, code="int f(int a, int b) { return a + b; }")
        vocabulary = ("a", "b", "f", "g1", "g2", "g3", "g4", "g5")
        for seed in range(5):
            result = mhm_attack(model, sample, AttackConfig("mhm", candidates=1, max_iterations=40, seed=seed),
                                vocabulary)
            self.assertFalse(result.success)
            self.assertEqual(set(result.rename_map), {"f", "a", "b"}, seed)
            self.assertFalse({"f", "a", "b"} & set(result.rename_map.values()), result.renames)
            self.assertEqual(len(set(result.rename_map.values())), 3)
            self.assertTrue(check_rename_only(sample.code, result))
            self.assertEqual(set(extract_identifiers(tokenize(result.perturbed_code))),
                             set(result.rename_map.values()))

    def test_no_identifiers(self):
        model = TargetModel(zero_params(Architecture(64, 0, 2)))
        sample = make_sample("s", 0, code="int;")
        result = mhm_attack(model, sample, AttackConfig("mhm"), ("x",))
        self.assertFalse(result.success)
        self.assertEqual(result.queries, 0)


class AsrTests(SimpleTestCase):
    def setUp(self):
        self.model = TargetModel(keyword_params("secret", dim=WIDE))
        self.samples = (
            [keyed_sample(f"flip{index}") for index in range(2)]
            + [plain_sample(f"hold{index}") for index in range(3)]
            + [keyed_sample(f"miss{index}", label=1) for index in range(5)]
        )
        # Harvesting "secret" from the corpus would let renames plant it.
        self.vocabulary = build_substitution_vocabulary([], fallback_pool=10)

    def test_success_rate_counts_only_attacked_samples(self):
        for kind in ("wir_random", "mhm"):
            with self.subTest(kind=kind):
                cfg = AttackConfig(kind, candidates=5, max_iterations=40, seed=1)
                report = evaluate_asr(self.model, self.samples, cfg, self.vocabulary)
                self.assertEqual((report.attacked, report.flipped, report.skipped), (5, 2, 5))
                self.assertAlmostEqual(report.asr, 0.4)
                self.assertEqual(report.semantic_violations, 0)

    def test_workers_do_not_change_the_report(self):
        cfg = AttackConfig("mhm", candidates=3, max_iterations=20, seed=9)
        serial = evaluate_asr(self.model, self.samples, cfg, self.vocabulary)
        parallel = evaluate_asr(self.model, self.samples, cfg, self.vocabulary, workers=4)
        self.assertEqual(serial.to_dict(), parallel.to_dict())

    def test_nothing_attackable(self):
        report = evaluate_asr(self.model, self.samples[5:], AttackConfig("wir_random", candidates=2), self.vocabulary)
        self.assertEqual(report.attacked, 0)
        self.assertIsNone(report.asr)
        self.assertIsNone(report.to_dict()["asr"])

    def test_empty_test_set(self):
        with self.assertRaises(ValidationError) as cm:
            evaluate_asr(self.model, [], AttackConfig("wir_random"), self.vocabulary)
        self.assertEqual(cm.exception.code, "empty")

    def test_unknown_attack_kind(self):
        with self.assertRaises(ValidationError):
            AttackConfig("greedy")
