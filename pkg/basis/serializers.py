from rest_framework import serializers

from .specs import BasisFamily, BasisSpec


class BasisSpecSerializer(serializers.Serializer):
    """Serializer for BasisSpec values (composites nest their parts)"""
    family = serializers.ChoiceField(choices=BasisFamily.choices())
    dimension = serializers.IntegerField(min_value=1)
    domain = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2)
    degree = serializers.IntegerField(min_value=0, default=3)
    knots = serializers.ListField(child=serializers.FloatField(), required=False, allow_null=True)
    period = serializers.FloatField(required=False, allow_null=True)
    parts = serializers.ListField(child=serializers.DictField(), required=False, default=list)

    def to_representation(self, instance):
        data = {
            'family': instance.family.value,
            'dimension': instance.dimension,
            'domain': [float(v) for v in instance.domain],
            'degree': instance.degree,
        }
        if instance.knots is not None:
            data['knots'] = instance.knot_list()
        if instance.period is not None:
            data['period'] = float(instance.period)
        if instance.parts:
            data['parts'] = [BasisSpecSerializer(part).data for part in instance.parts]
        return data

    def validate_parts(self, value):
        parts = []
        for index, item in enumerate(value):
            child = BasisSpecSerializer(data=item)
            if not child.is_valid():
                raise serializers.ValidationError({index: child.errors})
            parts.append(child.validated_data)
        return parts

    def validate(self, attrs):
        if attrs['family'] == BasisFamily.COMPOSITE.value and not attrs.get('parts'):
            raise serializers.ValidationError("composite bases need parts")
        if attrs['family'] == BasisFamily.SEASONAL_BSPLINE.value and attrs.get('period') is None:
            raise serializers.ValidationError("seasonal bases need a period")
        return attrs

    def create(self, validated_data):
        parts = tuple(
            BasisSpecSerializer().create(part) for part in validated_data.get('parts') or ()
        )
        return BasisSpec(
            family=BasisFamily(validated_data['family']),
            dimension=validated_data['dimension'],
            domain=tuple(validated_data['domain']),
            degree=validated_data.get('degree', 3),
            knots=validated_data.get('knots'),
            period=validated_data.get('period'),
            parts=parts,
        )
