from rest_framework import serializers


class LevelMapField(serializers.Field):
    """{level: value} with the level written as its shortest decimal string."""

    def to_representation(self, value):
        return {f'{float(level):g}': float(v) for level, v in value.items()}

    def to_internal_value(self, data):
        if not isinstance(data, dict):
            raise serializers.ValidationError("expected an object keyed by level")
        try:
            return {float(level): float(v) for level, v in data.items()}
        except (TypeError, ValueError):
            raise serializers.ValidationError("levels and values must be numbers")


class ReplicateMetricsSerializer(serializers.Serializer):
    """Metrics of one evaluated replicate"""
    name = serializers.CharField()
    rmse = serializers.FloatField(min_value=0.0)
    log_rmse = serializers.FloatField()
    neg_log_score = serializers.FloatField()
    pointwise_coverage = LevelMapField()
    elliptical_coverage = LevelMapField()
    n_subjects = serializers.IntegerField(min_value=1)
    n_points = serializers.IntegerField(min_value=1)


class DatasetSidecarSerializer(serializers.Serializer):
    """JSON sidecar written next to a simulated dataset"""
    generator = serializers.CharField()
    seed = serializers.JSONField()
    params = serializers.DictField(required=False, default=dict)
    n_subjects = serializers.IntegerField(min_value=0, required=False)


class SampleSidecarSerializer(serializers.Serializer):
    """JSON sidecar of a simulator sample matrix: one record per row"""
    generator = serializers.CharField()
    seed = serializers.IntegerField()
    length = serializers.IntegerField(min_value=1)
    records = serializers.ListField(child=serializers.DictField())

    def validate(self, attrs):
        if not attrs['records']:
            raise serializers.ValidationError("sidecar lists no samples")
        return attrs
