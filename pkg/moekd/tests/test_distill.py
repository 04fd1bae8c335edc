import tempfile
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from moekd.corpus import generate_synthetic, group_cwes
from moekd.distill import (
    SoftLabelSet,
    StudentSpec,
    evaluate,
    generate_soft_knowledge,
    load_soft_labels,
    save_soft_labels,
    single_teacher_knowledge,
    student_seed,
    teacher_agreement,
    train_monolithic_teacher,
    train_single_teacher_baseline,
    train_student,
)
from moekd.features import FeatureTable, FeatureVector
from moekd.moe import train_experts, train_router
from moekd.nn import Architecture, entropy, init_params, softmax_t

from .factories import constant_params, make_sample, small_synthetic_spec, train_config


def kd_config(**kwargs):
    kwargs.setdefault("temperature", 2.0)
    return train_config("kd", **kwargs)


class LabelGuard:
    """Wraps a sample and counts reads of its label."""

    reads = 0

    def __init__(self, sample):
        self._sample = sample

    def __getattr__(self, name):
        if name == "label":
            LabelGuard.reads += 1
        return getattr(self._sample, name)


class StudentSpecTests(SimpleTestCase):
    def test_defaults_and_counts(self):
        spec = StudentSpec(512, 16)
        self.assertEqual(spec.name, "d512-h16")
        self.assertEqual(spec.parameter_count, 512 * 16 + 16 + 16 * 2 + 2)
        self.assertEqual(spec.to_dict()["parameters"], spec.parameter_count)

    def test_over_budget(self):
        with self.assertRaises(ValidationError) as cm:
            StudentSpec(1024, 32, budget=1000)
        self.assertEqual(cm.exception.code, "over_budget")

    def test_input_dim_must_be_power_of_two(self):
        with self.assertRaises(ValidationError):
            StudentSpec(300, 4)


class SoftLabelTests(SimpleTestCase):
    def test_logits_must_have_two_entries(self):
        with self.assertRaises(ValidationError) as cm:
            SoftLabelSet((("a", [1.0, 2.0, 3.0]),), 2.0)
        self.assertEqual(cm.exception.code, "dimension_mismatch")
        with self.assertRaises(ValidationError):
            SoftLabelSet((("a", [1.0, float("inf")]),), 2.0)

    def test_saved_soft_labels_reload(self):
        soft = SoftLabelSet((("a", [0.5, -0.25]), ("b", [1.0, 2.0])), 2.0)
        with tempfile.TemporaryDirectory() as tmp:
            loaded = load_soft_labels(save_soft_labels(Path(tmp) / "soft.jsonl", soft), 2.0)
        self.assertEqual(loaded.ids, ["a", "b"])
        np.testing.assert_array_equal(loaded.records[1][1], [1.0, 2.0])


class StudentTrainingTests(SimpleTestCase):
    def setUp(self):
        self.spec = StudentSpec(4, 0)
        self.teacher_logits = np.array([1.0, -0.5])
        self.soft = SoftLabelSet(tuple((f"s{index}", self.teacher_logits) for index in range(20)), 2.0)
        self.features = {f"s{index}": FeatureVector(np.zeros(4), 0.0) for index in range(20)}

    def test_zero_learning_rate_keeps_initialization(self):
        cfg = kd_config(learning_rate=0.0)
        result = train_student(self.spec, self.soft, self.features, cfg)
        self.assertTrue(result.params.equals(init_params(self.spec.architecture, student_seed(cfg, self.spec))))

    def test_constant_teacher_is_matched(self):
        cfg = kd_config(epochs=200, learning_rate=0.5)
        result = train_student(self.spec, self.soft, self.features, cfg)
        floor = 4.0 * entropy(softmax_t(self.teacher_logits, 2.0))
        self.assertAlmostEqual(result.loss_trace[-1], floor, delta=1e-3)
        self.assertGreaterEqual(result.loss_trace[-1], floor - 1e-12)

    def test_requires_kd_loss(self):
        with self.assertRaises(ValidationError):
            train_student(self.spec, self.soft, self.features, train_config("bce"))

    def test_missing_features(self):
        features = dict(self.features)
        del features["s3"]
        with self.assertRaises(ValidationError) as cm:
            train_student(self.spec, self.soft, features, kd_config())
        self.assertEqual(cm.exception.code, "missing_features")

    def test_empty_soft_set(self):
        with self.assertRaises(ValidationError) as cm:
            train_student(self.spec, SoftLabelSet((), 2.0), self.features, kd_config())
        self.assertEqual(cm.exception.code, "empty")

    def test_agreement(self):
        student = constant_params([1.0, -0.5], input_dim=4)
        self.assertEqual(teacher_agreement(student, self.soft, self.features), 1.0)
        flipped = SoftLabelSet((("s0", [0.0, 2.0]),), 2.0)
        self.assertEqual(teacher_agreement(student, flipped, self.features), 0.0)
        self.assertIsNone(teacher_agreement(student, SoftLabelSet((), 2.0), self.features))

    def test_evaluate(self):
        student = constant_params([0.0, 1.0], input_dim=4)
        samples = [make_sample("s0", 1), make_sample("s1", 0), make_sample("s2", 1), make_sample("s3", 1)]
        self.assertEqual(evaluate(student, samples, self.features), 0.75)
        self.assertIsNone(evaluate(student, [], self.features))


class MoEDistillationTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        corpus = generate_synthetic(small_synthetic_spec(12), seed=17)
        cls.samples = list(corpus)
        cls.grouping = group_cwes(corpus, min_count=5)
        cls.teacher_features = FeatureTable.from_samples(corpus, 128)
        cls.student_features = FeatureTable.from_samples(corpus, 64)
        arch = Architecture(128, 4, 2)
        cls.experts = train_experts(cls.samples, cls.grouping, cls.teacher_features, train_config(epochs=3), arch)
        cls.router = train_router(
            cls.samples, cls.grouping, cls.teacher_features, train_config("focal", epochs=3, gamma=2.0), arch
        )
        cls.teacher = train_monolithic_teacher(cls.samples, cls.teacher_features, train_config(epochs=3), arch)

    def test_student_never_reads_labels(self):
        LabelGuard.reads = 0
        guarded = [LabelGuard(sample) for sample in self.samples]
        distill_ids = [sample.id for sample in guarded]
        soft, knowledge = generate_soft_knowledge(self.router, self.experts, distill_ids, self.teacher_features, 2)
        train_student(StudentSpec(64, 2), soft, self.student_features, kd_config(epochs=2))
        self.assertEqual(LabelGuard.reads, 0)
        self.assertEqual([item.sample_id for item in knowledge], distill_ids)

    def test_parallel_fusion_matches_serial(self):
        ids = [sample.id for sample in self.samples]
        serial, _ = generate_soft_knowledge(self.router, self.experts, ids, self.teacher_features, 2)
        parallel, _ = generate_soft_knowledge(self.router, self.experts, ids, self.teacher_features, 2, workers=3)
        for (id_a, a), (id_b, b) in zip(serial.records, parallel.records):
            self.assertEqual(id_a, id_b)
            np.testing.assert_array_equal(a, b)

    def test_both_methods_share_initialization(self):
        spec = StudentSpec(64, 2)
        cfg = kd_config(learning_rate=0.0)
        ids = [sample.id for sample in self.samples]
        soft, _ = generate_soft_knowledge(self.router, self.experts, ids, self.teacher_features, 2)
        moe_student = train_student(spec, soft, self.student_features, cfg)
        single_student = train_single_teacher_baseline(
            spec, self.teacher, ids, self.teacher_features, self.student_features, cfg
        )
        self.assertTrue(moe_student.params.equals(single_student.params))

    def test_single_teacher_knowledge_is_teacher_logits(self):
        ids = [sample.id for sample in self.samples[:3]]
        soft = single_teacher_knowledge(self.teacher, ids, self.teacher_features)
        self.assertEqual(soft.ids, ids)
        self.assertEqual(len(soft), 3)
