import numpy
from django.conf import settings
from rest_framework import serializers

from . import aggregation, byzantine, networks, optim
from .exceptions import ConfigError

METRICS_SCHEMA_VERSION = 1


# Serializer that refuses keys it does not declare
class StrictSerializer(serializers.Serializer):
    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: "Unknown field." for key in unknown})
        return super().to_internal_value(data)


class ArchSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=networks.ARCH_KINDS)
    input_shape = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=1, max_length=3, default=[1, 28, 28])
    classes = serializers.IntegerField(min_value=2, default=10)
    hidden = serializers.ListField(child=serializers.IntegerField(min_value=1), default=[128])
    filters = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=2, max_length=2, required=False)

    def validate(self, data):
        if data["kind"] == "conv-small":
            if len(data["input_shape"]) != 3:
                raise serializers.ValidationError({"input_shape": "conv-small needs a [channels, height, width] input shape."})
            if len(data["hidden"]) != 1:
                raise serializers.ValidationError({"hidden": "conv-small has exactly one hidden dense layer; give a single width."})
        try:
            networks.Architecture.from_config(data)
        except ValueError as error:
            raise serializers.ValidationError({"input_shape": str(error)})
        return data


class BlobsSerializer(StrictSerializer):
    classes = serializers.IntegerField(min_value=2, required=False)
    n_per_class = serializers.IntegerField(min_value=1, default=100)
    test_per_class = serializers.IntegerField(min_value=1, default=20)
    dim = serializers.IntegerField(min_value=1, required=False)
    spread = serializers.FloatField(min_value=0, default=0.05)
    image_shape = serializers.ListField(child=serializers.IntegerField(min_value=1), allow_null=True, required=False)


class DatasetSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=("mnist", "fashion-mnist", "cifar10", "blobs"))
    root = serializers.CharField(allow_null=True, default=None)
    train_subset = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    test_subset = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    blobs = BlobsSerializer(required=False)


class PartitionSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=("iid", "label_skew"), default="iid")
    alpha = serializers.FloatField(min_value=1e-12, default=0.5)
    max_retries = serializers.IntegerField(min_value=1, default=100)


class OptimizerSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=optim.OPTIMIZER_KINDS, default="adam")
    lr = serializers.FloatField(min_value=0, default=0.001)
    betas = serializers.ListField(child=serializers.FloatField(min_value=0, max_value=1), min_length=2, max_length=2, default=[0.9, 0.999])
    eps = serializers.FloatField(min_value=0, default=1e-8)
    momentum = serializers.FloatField(min_value=0, max_value=1, default=0.0)
    persist_state = serializers.BooleanField(default=True)


class PgdSerializer(StrictSerializer):
    epsilon = serializers.FloatField(min_value=0, default=0.3)
    step_size = serializers.FloatField(min_value=1e-12, default=0.01)
    steps = serializers.IntegerField(min_value=1, default=40)
    restarts = serializers.IntegerField(min_value=1, default=1)
    random_init = serializers.BooleanField(default=False)


class EvalPgdSerializer(PgdSerializer):
    random_init = serializers.BooleanField(default=True)


class AggregationSerializer(StrictSerializer):
    rule = serializers.ChoiceField(choices=aggregation.AGGREGATION_RULES, default="fedavg")
    f = serializers.IntegerField(min_value=0, default=0)


class AttackSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=byzantine.ATTACK_KINDS, default="none")
    colluders = serializers.ListField(child=serializers.IntegerField(min_value=0), allow_null=True, default=None)
    k = serializers.FloatField(default=-1.5)
    temperature = serializers.FloatField(min_value=1e-12, default=100.0)
    target_layer = serializers.CharField(allow_null=True, default=None)
    teacher_epochs = serializers.IntegerField(min_value=0, default=2)
    student_epochs = serializers.IntegerField(min_value=0, default=2)
    lr = serializers.FloatField(min_value=0, default=0.001)


# One (start_round, ratio) schedule segment
class SegmentField(serializers.ListField):
    child = serializers.FloatField()

    def to_internal_value(self, data):
        values = super().to_internal_value(data)
        if len(values) != 2:
            raise serializers.ValidationError("Each segment must be [start_round, ratio].")
        start, ratio = values
        if start != int(start) or start < 0:
            raise serializers.ValidationError("start_round must be a non-negative integer.")
        if not 0 <= ratio <= 1:
            raise serializers.ValidationError("ratio must lie in [0, 1].")
        return [int(start), ratio]


class ExperimentSerializer(StrictSerializer):
    name = serializers.CharField(required=False)
    seed = serializers.IntegerField(min_value=0, default=0)
    arch = ArchSerializer()
    dataset = DatasetSerializer()
    partition = PartitionSerializer()
    n_clients = serializers.IntegerField(min_value=1, default=51)
    clients_per_round = serializers.IntegerField(min_value=1, required=False)
    local_steps = serializers.IntegerField(min_value=1, default=1)
    batch_size = serializers.IntegerField(min_value=1, default=64)
    optimizer = OptimizerSerializer()
    mix_schedule = serializers.ListField(child=SegmentField(), min_length=1, default=[[0, 0.5]])
    pgd_train = PgdSerializer()
    pgd_eval = EvalPgdSerializer()
    logit_scale_T = serializers.FloatField(min_value=1e-12, allow_null=True, default=None)
    surrogate_checkpoint = serializers.CharField(allow_null=True, default=None)
    aggregation = AggregationSerializer()
    attack = AttackSerializer()
    total_rounds = serializers.IntegerField(min_value=1, default=100)
    eval_every = serializers.IntegerField(min_value=1, default=10)
    eval_subset = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    eval_batch_size = serializers.IntegerField(min_value=1, default=256)
    per_client_robustness = serializers.BooleanField(default=False)
    record_wall_time = serializers.BooleanField(default=False)
    workers = serializers.IntegerField(min_value=1, required=False)

    # Sections that may be omitted entirely; their fields all have defaults
    optional_sections = ("partition", "optimizer", "pgd_train", "pgd_eval", "aggregation", "attack")

    def to_internal_value(self, data):
        if isinstance(data, dict):
            data = {**{section: {} for section in self.optional_sections}, **data}
        return super().to_internal_value(data)

    def validate_mix_schedule(self, value):
        starts = [start for start, _ratio in value]
        if starts[0] != 0:
            raise serializers.ValidationError("The first segment must start at round 0.")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise serializers.ValidationError("Segment start rounds must be strictly increasing.")
        return value

    def validate(self, data):
        data.setdefault("clients_per_round", data["n_clients"])
        data.setdefault("workers", settings.FEDSIM_WORKERS)
        if data["clients_per_round"] > data["n_clients"]:
            raise serializers.ValidationError({"clients_per_round": f"Cannot exceed n_clients ({data['n_clients']})."})

        rule = aggregation.AggregationConfig(data["aggregation"]["rule"], data["aggregation"]["f"])
        if data["clients_per_round"] < rule.min_updates():
            raise serializers.ValidationError({"aggregation": f"{rule.rule} with f={rule.f} needs at least {rule.min_updates()} clients per round, "
                                                              f"but clients_per_round is {data['clients_per_round']}."})

        attack = data["attack"]
        if attack["kind"] != "none":
            f = data["aggregation"]["f"]
            if attack["colluders"] is None:
                attack["colluders"] = list(range(f))
            colluders = attack["colluders"]
            if len(set(colluders)) != len(colluders):
                raise serializers.ValidationError({"attack": {"colluders": "Colluder ids must be distinct."}})
            if len(colluders) != f:
                raise serializers.ValidationError({"attack": {"colluders": f"Expected {f} colluders to match aggregation.f, got {len(colluders)}."}})
            if any(client_id >= data["n_clients"] for client_id in colluders):
                raise serializers.ValidationError({"attack": {"colluders": f"Colluder ids must be below n_clients ({data['n_clients']})."}})
            if attack["kind"] == "convergence" and len(colluders) < 2:
                raise serializers.ValidationError({"attack": {"colluders": "The convergence attack needs at least 2 colluders."}})
        else:
            attack["colluders"] = []

        arch = data["arch"]
        dataset = data["dataset"]
        if dataset["kind"] == "blobs":
            # Blob samples take their class count and shape from the architecture
            blobs = dataset.setdefault("blobs", BlobsSerializer().to_internal_value({}))
            blobs.setdefault("classes", arch["classes"])
            blobs.setdefault("dim", int(numpy.prod(arch["input_shape"])))
            if blobs.get("image_shape") is None and len(arch["input_shape"]) > 1:
                blobs["image_shape"] = list(arch["input_shape"])
            if blobs["classes"] != arch["classes"]:
                raise serializers.ValidationError({"dataset": {"blobs": {"classes": "Must match arch.classes."}}})

        if attack["target_layer"] is not None:
            layers = networks.Architecture.from_config(arch).layer_names()
            if attack["target_layer"] not in layers:
                raise serializers.ValidationError({"attack": {"target_layer": f"Must be one of {', '.join(layers)}."}})
        return data


def validate_config(document):
    """ Validate a raw experiment config document

    Returns
    -------
    dict
        The resolved config with every default filled in

    Raises
    ------
    ConfigError
        With DRF's field-level detail
    """

    serializer = ExperimentSerializer(data=document)
    if not serializer.is_valid():
        raise ConfigError(serializer.errors)
    return _plain(serializer.validated_data)


# Convert DRF's OrderedDicts to plain containers for JSON output
def _plain(value):
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    elif isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


# One line of metrics.jsonl
class RoundRecordSerializer(serializers.Serializer):
    schema_version = serializers.IntegerField()
    run_id = serializers.CharField()
    round = serializers.IntegerField(min_value=0)
    rule = serializers.CharField()
    ratio = serializers.FloatField(min_value=0, max_value=1)
    participants = serializers.ListField(child=serializers.IntegerField())
    colluders = serializers.ListField(child=serializers.IntegerField())
    selected_ids = serializers.ListField(child=serializers.IntegerField())
    kept_count = serializers.IntegerField(allow_null=True)
    excluded_ids = serializers.ListField(child=serializers.IntegerField())
    colluders_identical = serializers.BooleanField(allow_null=True)
    l2_proximity = serializers.FloatField(allow_null=True)
    train_loss = serializers.FloatField(allow_null=True)
    aborted = serializers.BooleanField()
    abort_reason = serializers.CharField(allow_null=True)
    clean_acc = serializers.FloatField(min_value=0, max_value=1, allow_null=True)
    adv_pgd = serializers.FloatField(min_value=0, max_value=1, allow_null=True)
    adv_logit_scaled = serializers.FloatField(min_value=0, max_value=1, allow_null=True)
    adv_transfer = serializers.FloatField(min_value=0, max_value=1, allow_null=True)
    client_clean_acc = serializers.FloatField(min_value=0, max_value=1, allow_null=True)
    client_clean_accs = serializers.ListField(child=serializers.FloatField(), allow_null=True)
    client_adv_accs = serializers.ListField(child=serializers.FloatField(), allow_null=True)
    wall_time = serializers.FloatField(required=False)
