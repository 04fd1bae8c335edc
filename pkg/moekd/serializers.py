# moekd/serializers.py
"""
Schemas for every JSON/JSONL record and config the pipeline reads.

Each serializer validates raw parsed JSON and ``create()`` turns the
validated data into the matching domain object.
"""

from rest_framework import serializers

UNKNOWN_CWE = "CWE-unknown"


class StrictSerializer(serializers.Serializer):
    """Rejects keys the schema does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ["Unknown field."] for key in unknown})
        return super().to_internal_value(data)


# ============================================================================
# CORPUS RECORDS
# ============================================================================


class CodeSampleSerializer(serializers.Serializer):
    id = serializers.CharField(trim_whitespace=False)
    code = serializers.CharField(allow_blank=True, trim_whitespace=False)
    label = serializers.ChoiceField(choices=[0, 1])
    cwe = serializers.CharField(allow_null=True, required=False, default=None, trim_whitespace=False)
    project = serializers.CharField(trim_whitespace=False)
    loc = serializers.IntegerField(min_value=1)

    def validate(self, attrs):
        # Vulnerable samples always carry a tag; a missing one means unknown
        if attrs["label"] == 1 and attrs.get("cwe") is None:
            attrs["cwe"] = UNKNOWN_CWE
        return attrs

    def create(self, validated_data):
        from .corpus import CodeSample

        return CodeSample(**validated_data)


class SplitsSerializer(StrictSerializer):
    expert_train = serializers.ListField(child=serializers.CharField(trim_whitespace=False))
    distill_train = serializers.ListField(child=serializers.CharField(trim_whitespace=False))
    valid = serializers.ListField(child=serializers.CharField(trim_whitespace=False))
    test = serializers.ListField(child=serializers.CharField(trim_whitespace=False))

    def create(self, validated_data):
        from .corpus import Splits

        return Splits(**{key: tuple(value) for key, value in validated_data.items()})


# ============================================================================
# SYNTHETIC BENCHMARK SPEC
# ============================================================================


class SyntheticGroupSerializer(StrictSerializer):
    name = serializers.CharField()
    signal_tokens = serializers.ListField(child=serializers.CharField(), min_length=1)
    vulnerable_count = serializers.IntegerField(min_value=1)


class SyntheticSpecSerializer(StrictSerializer):
    groups = SyntheticGroupSerializer(many=True)
    projects = serializers.IntegerField(min_value=1)
    noise_tokens = serializers.ListField(child=serializers.CharField(), min_length=1)
    loc_range = serializers.ListField(
        child=serializers.IntegerField(min_value=4), min_length=2, max_length=2
    )
    benign_per_vulnerable = serializers.IntegerField(min_value=1, default=1)
    signals_per_sample = serializers.IntegerField(min_value=1, default=2)

    def validate_groups(self, value):
        if len(value) < 2:
            raise serializers.ValidationError("At least two CWE groups are required.")
        return value

    def validate_loc_range(self, value):
        if value[0] > value[1]:
            raise serializers.ValidationError("loc_range must be [min, max] with min <= max.")
        return value

    def create(self, validated_data):
        from .corpus import SyntheticGroup, SyntheticSpec

        groups = tuple(
            SyntheticGroup(
                name=group["name"],
                signal_tokens=tuple(group["signal_tokens"]),
                vulnerable_count=group["vulnerable_count"],
            )
            for group in validated_data["groups"]
        )
        return SyntheticSpec(
            groups=groups,
            projects=validated_data["projects"],
            noise_tokens=tuple(validated_data["noise_tokens"]),
            loc_range=tuple(validated_data["loc_range"]),
            benign_per_vulnerable=validated_data["benign_per_vulnerable"],
            signals_per_sample=validated_data["signals_per_sample"],
        )


# ============================================================================
# TRAINING CONFIGS
# ============================================================================


class LossSpecSerializer(StrictSerializer):
    KIND_CHOICES = ["bce", "focal", "kd"]

    kind = serializers.ChoiceField(choices=KIND_CHOICES)
    alpha = serializers.ListField(
        child=serializers.FloatField(), required=False, allow_null=True, default=None
    )
    gamma = serializers.FloatField(min_value=0.0, default=2.0)
    temperature = serializers.FloatField(default=2.0)

    def create(self, validated_data):
        from .nn import LossSpec

        alpha = validated_data.get("alpha")
        return LossSpec(
            kind=validated_data["kind"],
            alpha=tuple(alpha) if alpha is not None else None,
            gamma=validated_data["gamma"],
            temperature=validated_data["temperature"],
        )


class TrainConfigSerializer(StrictSerializer):
    epochs = serializers.IntegerField(min_value=1, default=30)
    batch_size = serializers.IntegerField(min_value=1, default=16)
    learning_rate = serializers.FloatField(default=0.1)
    momentum = serializers.FloatField(min_value=0.0, default=0.9)
    seed = serializers.IntegerField(required=False, allow_null=True, default=None)
    loss = LossSpecSerializer()
    hidden = serializers.IntegerField(min_value=0, default=32)
    input_dim = serializers.IntegerField(min_value=2, default=1024)
    patience = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    min_delta = serializers.FloatField(min_value=0.0, default=1e-5)

    def to_train_config(self, seed):
        """Build a TrainConfig; the block's own seed wins over the run seed."""
        from .nn import TrainConfig

        data = self.validated_data
        return TrainConfig(
            epochs=data["epochs"],
            batch_size=data["batch_size"],
            learning_rate=data["learning_rate"],
            momentum=data["momentum"],
            seed=data["seed"] if data["seed"] is not None else seed,
            loss=LossSpecSerializer().create(data["loss"]),
            patience=data["patience"],
            min_delta=data["min_delta"],
        )


class StudentSpecSerializer(StrictSerializer):
    name = serializers.CharField(required=False, default="")
    input_dim = serializers.IntegerField(min_value=2)
    hidden = serializers.IntegerField(min_value=0)
    budget = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)

    def create(self, validated_data):
        from .distill import StudentSpec

        return StudentSpec(**validated_data)


class AttackConfigSerializer(StrictSerializer):
    KIND_CHOICES = ["wir_random", "mhm"]

    kind = serializers.ChoiceField(choices=KIND_CHOICES)
    candidates = serializers.IntegerField(min_value=1, default=30)
    max_iterations = serializers.IntegerField(min_value=1, default=100)
    query_budget = serializers.IntegerField(min_value=0, required=False, allow_null=True, default=None)
    fallback_pool = serializers.IntegerField(min_value=0, default=200)
    seed = serializers.IntegerField(required=False, allow_null=True, default=None)

    def to_attack_config(self, seed):
        from .attacks import AttackConfig

        data = dict(self.validated_data)
        if data["seed"] is None:
            data["seed"] = seed
        return AttackConfig(**data)


# ============================================================================
# PIPELINE CONFIG
# ============================================================================


def _train_block(kind, **loss_defaults):
    return {"loss": {"kind": kind, **loss_defaults}}


class PipelineConfigSerializer(StrictSerializer):
    corpus = serializers.CharField()
    workdir = serializers.CharField()
    seed = serializers.IntegerField()
    min_count = serializers.IntegerField(min_value=1, default=100)
    grouping_basis = serializers.ChoiceField(choices=["expert_train", "corpus"], default="expert_train")
    k = serializers.IntegerField(min_value=1, default=2)
    synthetic = SyntheticSpecSerializer(required=False, allow_null=True, default=None)
    experts = TrainConfigSerializer(default=lambda: _train_block("bce"))
    router = TrainConfigSerializer(default=lambda: _train_block("focal", gamma=2.0))
    baseline_teacher = TrainConfigSerializer(default=lambda: _train_block("bce"))
    student = TrainConfigSerializer(
        default=lambda: {"loss": {"kind": "kd", "temperature": 2.0}, "patience": 5}
    )
    student_spec = StudentSpecSerializer()
    sweep = StudentSpecSerializer(many=True, required=False, default=list)
    attacks = AttackConfigSerializer(many=True, required=False, default=list)
    attack_sweep = serializers.BooleanField(default=False)
    dump_perturbed = serializers.BooleanField(default=False)

    def validate_experts(self, value):
        return self._expect_loss(value, {"bce"}, "experts")

    def validate_router(self, value):
        return self._expect_loss(value, {"focal", "bce"}, "router")

    def validate_baseline_teacher(self, value):
        return self._expect_loss(value, {"bce"}, "baseline_teacher")

    def validate_student(self, value):
        return self._expect_loss(value, {"kd"}, "student")

    @staticmethod
    def _expect_loss(value, kinds, block):
        if value["loss"]["kind"] not in kinds:
            raise serializers.ValidationError(
                f"{block} must use one of {sorted(kinds)} losses, got {value['loss']['kind']!r}."
            )
        return value
