"""
End-to-end MoEKD pipeline.

Stages run in the order of STAGES. Each one reads the artifacts its upstream
stages recorded in ``manifest.json`` and records the SHA-256 of everything it
writes, so a rerun with an unchanged config skips every stage and a modified
artifact stops the run instead of being silently consumed.

Workdir layout:
    corpus/       balanced corpus, splits, CWE grouping, cached feature tables
    checkpoints/  experts, router, single teacher, students (MOEKD1 files)
    soft/         fused MoE knowledge and single-teacher logits (JSONL)
    metrics/      per-stage metrics JSON
    attacks/      one ASR report per (student, attack)
    report/       report.txt and summary.json
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

from django.conf import settings
from django.core.exceptions import ValidationError

from .artifacts import dumps_canonical, read_json, sha256_file, write_json, write_jsonl
from .attacks import TargetModel, build_substitution_vocabulary, evaluate_asr
from .checkpoints import load_checkpoint, save_checkpoint
from .corpus import (
    balance_corpus,
    generate_synthetic,
    group_cwes,
    load_corpus,
    load_grouping,
    load_splits,
    save_corpus,
    save_grouping,
    save_splits,
    split_corpus,
)
from .decorators import stage
from .distill import (
    SoftLabelSet,
    evaluate,
    generate_soft_knowledge,
    save_soft_labels,
    single_teacher_knowledge,
    student_seed,
    teacher_agreement,
    train_monolithic_teacher,
    train_single_teacher_baseline,
    train_student,
)
from .features import FeatureTable
from .moe import (
    RouterModel,
    expert_subspace_accuracy,
    expert_targets,
    load_expert_set,
    load_fused,
    moe_teacher_accuracy,
    router_accuracy,
    router_loss,
    router_targets,
    save_expert_set,
    save_fused,
    train_experts,
    train_router,
)
from .nn import Architecture
from .reporting import asr_comparison, build_report
from .serializers import (
    AttackConfigSerializer,
    PipelineConfigSerializer,
    StudentSpecSerializer,
    SyntheticSpecSerializer,
    TrainConfigSerializer,
)
from .validators import validate_file_exists, validate_power_of_two

logger = logging.getLogger("moekd")

STAGES = ("prepare", "train-experts", "train-router", "fuse", "distill", "eval", "attack", "report")
MANIFEST_VERSION = 1
TRAIN_BLOCKS = ("experts", "router", "baseline_teacher", "student")
METHODS = (("moe", "MoEKD"), ("single", "Single-teacher KD"))
EXTERNAL_PREFIX = "external/"


# ============================================================================
# ERRORS
# ============================================================================


def describe_error(exc):
    if isinstance(exc, ValidationError):
        return "; ".join(exc.messages)
    return str(exc) or type(exc).__name__


class StageFailed(Exception):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"Stage {stage!r} failed: {describe_error(cause)}")


class StaleArtifact(Exception):
    def __init__(self, key, expected, actual):
        self.key = key
        found = "missing" if actual is None else f"sha256 {actual[:12]}"
        super().__init__(
            f"Artifact {key} does not match the manifest (recorded sha256 {expected[:12]}, found {found}); "
            "refusing to resume."
        )


# ============================================================================
# CONFIG
# ============================================================================


def _plain(data):
    """Validated serializer data as plain JSON types."""
    return json.loads(json.dumps(data))


def _validated(serializer_class, raw, what):
    serializer = serializer_class(data=raw)
    if not serializer.is_valid():
        raise ValidationError(f"Invalid {what} config: {_plain(serializer.errors)}", code="invalid_config")
    return serializer


def _resolve(path):
    path = Path(path)
    return path if path.is_absolute() else settings.BASE_DIR / path


@dataclass(frozen=True)
class PipelineConfig:
    """
    Validated pipeline configuration.

    ``data`` keeps the normalized JSON form (every default filled in) used for
    stage config hashes; the helpers build domain objects from it.
    """

    data: dict
    corpus: Path
    workdir: Path

    @classmethod
    def from_dict(cls, raw):
        """
        Validate a parsed config file.

        Raises:
            ValidationError: unknown keys, bad values or inconsistent dimensions
                (code "invalid_config")
        """
        data = _plain(_validated(PipelineConfigSerializer, raw, "pipeline").validated_data)

        # Defaults of nested blocks bypass validation; run them through the schema.
        for block in TRAIN_BLOCKS:
            data[block] = _plain(_validated(TrainConfigSerializer, data[block], block).validated_data)

        if data["router"]["input_dim"] != data["experts"]["input_dim"]:
            raise ValidationError("router and experts must share input_dim.", code="invalid_config")
        kinds = [attack["kind"] for attack in data["attacks"]]
        if len(set(kinds)) != len(kinds):
            raise ValidationError("Each attack kind may be configured once.", code="invalid_config")

        config = cls(
            data=data,
            corpus=_resolve(data["corpus"]),
            workdir=_resolve(settings.MOEKD_WORKDIR or data["workdir"]),
        )
        for dim in config.feature_dims:
            try:
                validate_power_of_two(dim)
            except ValidationError as exc:
                raise ValidationError(describe_error(exc), code="invalid_config") from exc
        if not config.students:
            raise ValidationError("No student spec configured.", code="invalid_config")
        return config

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(Path(path)))

    @property
    def seed(self):
        return self.data["seed"]

    def train_config(self, block, seed):
        return _validated(TrainConfigSerializer, self.data[block], block).to_train_config(seed)

    def architecture(self, block, classes=2):
        return Architecture(self.data[block]["input_dim"], self.data[block]["hidden"], classes)

    @cached_property
    def students(self):
        """The primary student followed by sweep sizes, unique by name."""
        specs = []
        for raw in [self.data["student_spec"], *self.data["sweep"]]:
            spec = _validated(StudentSpecSerializer, raw, "student spec").save()
            if spec.name not in {existing.name for existing in specs}:
                specs.append(spec)
        return tuple(specs)

    @property
    def feature_dims(self):
        dims = {self.data[block]["input_dim"] for block in ("experts", "router", "baseline_teacher")}
        dims.update(spec["input_dim"] for spec in [self.data["student_spec"], *self.data["sweep"]])
        return sorted(dims)

    def attack_configs(self, seed):
        return [
            _validated(AttackConfigSerializer, raw, "attack").to_attack_config(seed)
            for raw in self.data["attacks"]
        ]

    @cached_property
    def synthetic_spec(self):
        if self.data["synthetic"] is None:
            return None
        return _validated(SyntheticSpecSerializer, self.data["synthetic"], "synthetic").save()


# ============================================================================
# PIPELINE
# ============================================================================


class Pipeline:
    def __init__(self, config, seed_offset=0, workers=1):
        self.config = config
        self.seed = config.seed + seed_offset
        self.workers = max(1, workers)
        self.workdir = config.workdir
        self.manifest_path = self.workdir / "manifest.json"
        self.manifest = Manifest.load(self.manifest_path)

    # ------------------------------------------------------------------
    # Manifest plumbing used by the @stage decorator
    # ------------------------------------------------------------------

    def path(self, *parts):
        return self.workdir.joinpath(*parts)

    def artifact_key(self, path):
        """Workdir-relative posix path; files outside the workdir are keyed by name."""
        path = Path(path)
        try:
            return path.resolve().relative_to(self.workdir.resolve()).as_posix()
        except ValueError:
            return EXTERNAL_PREFIX + path.name

    def _key_path(self, key):
        if key.startswith(EXTERNAL_PREFIX):
            return self.config.corpus
        return self.workdir / key

    def _current_hash(self, key):
        path = self._key_path(key)
        return sha256_file(path) if path.is_file() else None

    def config_hash(self, name, block):
        payload = dumps_canonical({"stage": name, "seed": self.seed, "config": block})
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def stage_inputs(self, name, requires, extra=()):
        """
        Input hashes for a stage: extra files plus every recorded output of ``requires``.

        Raises:
            StageFailed: an upstream stage has not run
            StaleArtifact: an upstream output changed since it was recorded
        """
        inputs = {}
        for path in extra:
            try:
                validate_file_exists(path, "input file")
            except ValidationError as exc:
                raise StageFailed(name, exc) from exc
            inputs[self.artifact_key(path)] = sha256_file(path)

        missing = [upstream for upstream in requires if upstream not in self.manifest.stages]
        if missing:
            raise StageFailed(
                name,
                ValidationError(f"missing artifacts of stage(s) {', '.join(missing)}; run them first", code="missing_stage"),
            )
        for upstream in requires:
            for key, digest in self.manifest.stages[upstream]["outputs"].items():
                actual = self._current_hash(key)
                if actual != digest:
                    raise StaleArtifact(key, digest, actual)
                inputs[key] = digest
        return dict(sorted(inputs.items()))

    def verify_outputs(self, name):
        for key, digest in self.manifest.stages[name]["outputs"].items():
            actual = self._current_hash(key)
            if actual != digest:
                raise StaleArtifact(key, digest, actual)

    def record_stage(self, name, config_hash, inputs, outputs):
        recorded = {self.artifact_key(path): sha256_file(path) for path in outputs}
        self.manifest.record(name, config_hash, inputs, dict(sorted(recorded.items())))
        self.manifest.save()

    # ------------------------------------------------------------------
    # Artifact loaders
    # ------------------------------------------------------------------

    def corpus(self):
        return load_corpus(self.path("corpus", "corpus.jsonl"))

    def splits(self):
        return load_splits(self.path("corpus", "splits.json"))

    def grouping(self):
        return load_grouping(self.path("corpus", "grouping.json"))

    def features(self, dim):
        return FeatureTable.load(self.path("corpus", f"features-d{dim}.npy"))

    def experts(self):
        return load_expert_set(self.path("checkpoints", "experts"), self.grouping())

    def router(self):
        return RouterModel(load_checkpoint(self.path("checkpoints", "router.moekd"))[0], self.grouping())

    def single_teacher(self):
        return load_checkpoint(self.path("checkpoints", "single_teacher.moekd"))[0]

    def student_path(self, method, spec):
        return self.path("checkpoints", "students", f"{method}-{spec.name}.moekd")

    def split_samples(self, corpus, ids):
        """Samples of one split in corpus order."""
        wanted = set(ids)
        return [sample for sample in corpus if sample.id in wanted]

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def gen_data(self):
        """Write the synthetic corpus to the configured corpus path."""
        try:
            spec = self.config.synthetic_spec
            if spec is None:
                raise ValidationError("The config has no synthetic block.", code="no_synthetic")
            path = save_corpus(generate_synthetic(spec, self.seed), self.config.corpus)
        except ValidationError as exc:
            raise StageFailed("gen-data", exc) from exc
        logger.info(f"Synthetic corpus written to {path}")
        return path

    @stage(
        "prepare",
        reads=lambda p: [p.config.corpus],
        config=lambda p: {
            "min_count": p.config.data["min_count"],
            "grouping_basis": p.config.data["grouping_basis"],
            "feature_dims": p.config.feature_dims,
        },
    )
    def prepare(self):
        balanced = balance_corpus(load_corpus(self.config.corpus), self.seed)
        splits = split_corpus(balanced, self.seed)
        if self.config.data["grouping_basis"] == "expert_train":
            basis = balanced.subset(splits.expert_train)
        else:
            basis = balanced
        grouping = group_cwes(basis, self.config.data["min_count"])
        logger.info(f"CWE groups: {', '.join(grouping.names)}")

        written = [
            save_corpus(balanced, self.path("corpus", "corpus.jsonl")),
            save_splits(splits, self.path("corpus", "splits.json")),
            save_grouping(grouping, self.path("corpus", "grouping.json")),
        ]
        for dim in self.config.feature_dims:
            table = FeatureTable.from_samples(balanced, dim)
            written.extend(table.save(self.path("corpus", f"features-d{dim}.npy")))
        return written

    @stage(
        "train-experts",
        requires=("prepare",),
        config=lambda p: {"experts": p.config.data["experts"], "baseline_teacher": p.config.data["baseline_teacher"]},
    )
    def train_experts(self):
        corpus, grouping = self.corpus(), self.grouping()
        expert_train = self.split_samples(corpus, self.splits().expert_train)

        cfg = self.config.train_config("experts", self.seed)
        arch = self.config.architecture("experts")
        features = self.features(arch.input_dim)
        experts = train_experts(expert_train, grouping, features, cfg, arch, workers=self.workers)
        written = save_expert_set(experts, self.path("checkpoints", "experts"), cfg.loss, cfg.seed)

        baseline_cfg = self.config.train_config("baseline_teacher", self.seed)
        baseline_arch = self.config.architecture("baseline_teacher")
        baseline_features = self.features(baseline_arch.input_dim)
        teacher = train_monolithic_teacher(expert_train, baseline_features, baseline_cfg, baseline_arch)
        written.append(
            save_checkpoint(
                self.path("checkpoints", "single_teacher.moekd"), teacher, baseline_cfg.loss, baseline_cfg.seed
            )
        )

        metrics = {
            "experts": [
                {
                    "group": name,
                    "positives": sum(expert_targets(name, expert_train, grouping)),
                    "samples": len(expert_train),
                    "train_subspace_accuracy": expert_subspace_accuracy(
                        params, name, expert_train, grouping, features
                    ),
                }
                for name, params in experts.experts
            ],
            "single_teacher": {
                "samples": len(expert_train),
                "train_accuracy": evaluate(teacher, expert_train, baseline_features),
            },
        }
        written.append(write_json(self.path("metrics", "experts.json"), metrics))
        return written

    @stage("train-router", requires=("prepare",), config=lambda p: {"router": p.config.data["router"]})
    def train_router(self):
        corpus, grouping = self.corpus(), self.grouping()
        expert_train = self.split_samples(corpus, self.splits().expert_train)
        cfg = self.config.train_config("router", self.seed)
        arch = self.config.architecture("router", classes=len(grouping.groups))
        features = self.features(arch.input_dim)

        router = train_router(expert_train, grouping, features, cfg, arch)
        _, targets = router_targets(expert_train, grouping)
        counts = [targets.count(index) for index in range(len(grouping.groups))]
        loss = router_loss(cfg.loss, counts)
        metrics = {
            "groups": grouping.names,
            "counts": counts,
            "loss": loss.to_dict(),
            "train_accuracy": router_accuracy(router, expert_train, features),
        }
        return [
            save_checkpoint(self.path("checkpoints", "router.moekd"), router.params, loss, cfg.seed),
            write_json(self.path("metrics", "router.json"), metrics),
        ]

    @stage(
        "fuse",
        requires=("prepare", "train-experts", "train-router"),
        config=lambda p: {"k": p.config.data["k"], "temperature": p.config.data["student"]["loss"]["temperature"]},
    )
    def fuse(self):
        corpus, splits = self.corpus(), self.splits()
        distill_ids = [sample.id for sample in self.split_samples(corpus, splits.distill_train)]
        experts, router = self.experts(), self.router()
        k = self.config.data["k"]
        _, knowledge = generate_soft_knowledge(
            router,
            experts,
            distill_ids,
            self.features(experts.input_dim),
            k,
            self.config.data["student"]["loss"]["temperature"],
            workers=self.workers,
        )
        n = len(knowledge)
        metrics = {
            "k": k,
            "experts": len(experts),
            "samples": n,
            "router_passes": n,
            "expert_passes": n * k,
            "single_teacher_passes": n,
        }
        return [
            save_fused(self.path("soft", "fused.jsonl"), knowledge),
            write_json(self.path("metrics", "fuse.json"), metrics),
        ]

    @stage(
        "distill",
        requires=("prepare", "train-experts", "fuse"),
        config=lambda p: {
            "student": p.config.data["student"],
            "students": [spec.to_dict() for spec in p.config.students],
        },
    )
    def distill(self):
        corpus, splits = self.corpus(), self.splits()
        distill_ids = [sample.id for sample in self.split_samples(corpus, splits.distill_train)]
        cfg = self.config.train_config("student", self.seed)
        temperature = cfg.loss.temperature

        moe_soft = SoftLabelSet.from_fused(load_fused(self.path("soft", "fused.jsonl")), temperature)
        teacher = self.single_teacher()
        teacher_features = self.features(teacher.arch.input_dim)
        single_soft = single_teacher_knowledge(teacher, distill_ids, teacher_features, temperature)
        written = [save_soft_labels(self.path("soft", "single_teacher.jsonl"), single_soft)]

        rows = []
        for spec in self.config.students:
            features = self.features(spec.input_dim)
            for method, _ in METHODS:
                if method == "moe":
                    result = train_student(spec, moe_soft, features, cfg)
                    soft = moe_soft
                else:
                    result = train_single_teacher_baseline(
                        spec, teacher, distill_ids, teacher_features, features, cfg
                    )
                    soft = single_soft
                seed = student_seed(cfg, spec)
                path = save_checkpoint(self.student_path(method, spec), result.params, cfg.loss, seed)
                written.append(path)
                rows.append(
                    {
                        "method": method,
                        "student": spec.name,
                        "spec": spec.to_dict(),
                        "seed": seed,
                        "kd_loss": result.loss_trace,
                        "epochs_run": result.epochs_run,
                        "agreement": teacher_agreement(result.params, soft, features),
                        "checkpoint_bytes": path.stat().st_size,
                    }
                )
        written.append(
            write_json(self.path("metrics", "distill.json"), {"temperature": temperature, "students": rows})
        )
        return written

    @stage(
        "eval",
        requires=("prepare", "train-experts", "train-router", "distill"),
        config=lambda p: {"k": p.config.data["k"]},
    )
    def evaluate_models(self):
        corpus, splits, grouping = self.corpus(), self.splits(), self.grouping()
        test = self.split_samples(corpus, splits.test)
        valid = self.split_samples(corpus, splits.valid)
        held_out = valid + test
        experts, router, teacher = self.experts(), self.router(), self.single_teacher()
        teacher_features = self.features(experts.input_dim)
        baseline_features = self.features(teacher.arch.input_dim)
        k = self.config.data["k"]

        moe_accuracy = moe_teacher_accuracy(router, experts, test, teacher_features, k)
        teachers = [
            {"method": "MoEKD", "model": "MoE teacher", "accuracy": moe_accuracy},
            {
                "method": "Single-teacher KD",
                "model": "Single teacher",
                "accuracy": evaluate(teacher, test, baseline_features),
            },
        ]
        expert_rows = [
            {
                "group": name,
                "heldout_subspace_accuracy": expert_subspace_accuracy(
                    params, name, held_out, grouping, teacher_features
                ),
            }
            for name, params in experts.experts
        ]

        students = []
        for spec in self.config.students:
            features = self.features(spec.input_dim)
            for method, label in METHODS:
                path = self.student_path(method, spec)
                params, _ = load_checkpoint(path)
                students.append(
                    {
                        "method": label,
                        "key": method,
                        "student": spec.name,
                        "parameters": spec.parameter_count,
                        "checkpoint_bytes": path.stat().st_size,
                        "checkpoint_mb": round(path.stat().st_size / (1024 * 1024), 4),
                        "accuracy": evaluate(params, test, features),
                        "valid_accuracy": evaluate(params, valid, features),
                    }
                )

        metrics = {
            "k": k,
            "test_samples": len(test),
            "teachers": teachers,
            "experts": expert_rows,
            "router_heldout_accuracy": router_accuracy(router, held_out, teacher_features),
            "students": students,
            "primary_student": self.config.students[0].name,
        }
        return [write_json(self.path("metrics", "eval.json"), metrics)]

    @stage(
        "attack",
        requires=("prepare", "distill"),
        config=lambda p: {
            "attacks": p.config.data["attacks"],
            "attack_sweep": p.config.data["attack_sweep"],
            "dump_perturbed": p.config.data["dump_perturbed"],
            "students": [spec.name for spec in p.config.students],
        },
    )
    def attack(self):
        corpus, splits = self.corpus(), self.splits()
        test = self.split_samples(corpus, splits.test)
        training = self.split_samples(corpus, splits.expert_train) + self.split_samples(
            corpus, splits.distill_train
        )
        students = self.config.students if self.config.data["attack_sweep"] else self.config.students[:1]

        written = []
        rows = []
        for cfg in self.config.attack_configs(self.seed):
            vocabulary = build_substitution_vocabulary(training, cfg.fallback_pool)
            for spec in students:
                for method, label in METHODS:
                    model = TargetModel(load_checkpoint(self.student_path(method, spec))[0])
                    report = evaluate_asr(model, test, cfg, vocabulary, workers=self.workers)
                    stem = f"{method}-{spec.name}-{cfg.kind}"
                    written.append(
                        write_json(
                            self.path("attacks", f"{stem}.json"),
                            {**report.to_dict(), "method": label, "student": spec.name, "config": cfg.to_dict()},
                        )
                    )
                    if self.config.data["dump_perturbed"]:
                        written.append(
                            write_jsonl(
                                self.path("attacks", f"{stem}-perturbed.jsonl"),
                                [result.to_dict(include_code=True) for result in report.results],
                            )
                        )
                    rows.append(
                        {
                            "method": label,
                            "key": method,
                            "student": spec.name,
                            "parameters": spec.parameter_count,
                            "attack": cfg.kind,
                            "attacked": report.attacked,
                            "flipped": report.flipped,
                            "skipped": report.skipped,
                            "asr": report.asr,
                            "semantic_violations": report.semantic_violations,
                        }
                    )
        written.append(write_json(self.path("metrics", "attack.json"), {"rows": rows}))
        return written

    @stage("report", requires=STAGES[:-1])
    def report(self):
        summary, text = build_report(self.workdir)
        report_path = self.path("report", "report.txt")
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(text, encoding="utf-8")
        return [report_path, write_json(self.path("report", "summary.json"), summary)]

    # ------------------------------------------------------------------
    # Entry points
    # ------------------------------------------------------------------

    STAGE_METHODS = {
        "prepare": "prepare",
        "train-experts": "train_experts",
        "train-router": "train_router",
        "fuse": "fuse",
        "distill": "distill",
        "eval": "evaluate_models",
        "attack": "attack",
        "report": "report",
    }

    def run_stage(self, name):
        """Run one stage; returns True if it ran, False if it was up to date."""
        return getattr(self, self.STAGE_METHODS[name])()

    def run(self):
        """
        Every stage in order, generating the synthetic corpus first when needed.

        Returns:
            dict stage name -> "ran" or "skipped"
        """
        if self.config.synthetic_spec is not None and not self.config.corpus.exists():
            self.gen_data()
        return {name: "ran" if self.run_stage(name) else "skipped" for name in STAGES}

    def comparison(self):
        return asr_comparison(self.workdir)


# ============================================================================
# MANIFEST
# ============================================================================


class Manifest:
    """Stage records {config_hash, inputs, outputs}; no timestamps, so reruns are byte-identical."""

    def __init__(self, path, stages=None):
        self.path = path
        self.stages = stages or {}

    @classmethod
    def load(cls, path):
        if not path.is_file():
            return cls(path)
        data = read_json(path)
        if data.get("version") != MANIFEST_VERSION:
            raise ValidationError(f"Unsupported manifest version in {path}.", code="bad_manifest")
        return cls(path, data.get("stages", {}))

    def record(self, name, config_hash, inputs, outputs):
        self.stages[name] = {"config_hash": config_hash, "inputs": inputs, "outputs": outputs}

    def save(self):
        return write_json(self.path, {"version": MANIFEST_VERSION, "stages": self.stages})


def load_pipeline(config_path=None, seed_offset=0, workers=1):
    config = PipelineConfig.load(config_path or settings.MOEKD_DEFAULT_CONFIG)
    return Pipeline(config, seed_offset=seed_offset, workers=workers)
