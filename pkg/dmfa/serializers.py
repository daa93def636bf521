"""
JSON documents for DMFA architectures, parameters and hyperpriors.
"""
import numpy as np
from rest_framework import serializers

from gmm.serializers import MatrixField
from .architecture import DmfaArchitecture, validate
from .params import DmfaParams, LayerParams, PriorHyper


class DmfaArchitectureSerializer(serializers.Serializer):
    components = serializers.ListField(child=serializers.IntegerField(min_value=1), allow_empty=False)
    dims = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=2)

    def to_representation(self, instance):
        return {'components': list(instance.components), 'dims': list(instance.dims)}

    def validate(self, attrs):
        report = validate(DmfaArchitecture(tuple(attrs['components']), tuple(attrs['dims'])))
        if not report.ok:
            raise serializers.ValidationError([v['message'] for v in report.violations])
        return attrs

    def create(self, validated_data):
        return DmfaArchitecture(tuple(validated_data['components']), tuple(validated_data['dims']))


class LayerParamsSerializer(serializers.Serializer):
    weights = serializers.ListField(child=serializers.FloatField(min_value=0.0), allow_empty=False)
    means = MatrixField()
    loadings = serializers.ListField(child=MatrixField())
    noise = MatrixField()

    def to_representation(self, instance):
        return {
            'weights': np.asarray(instance.weights).tolist(),
            'means': np.asarray(instance.means).tolist(),
            'loadings': np.asarray(instance.loadings).tolist(),
            'noise': np.asarray(instance.noise).tolist(),
        }


class DmfaParamsSerializer(serializers.Serializer):
    """Layer-indexed arrays, top of the list is layer 1"""
    layers = LayerParamsSerializer(many=True)

    def to_representation(self, instance):
        return {'layers': [LayerParamsSerializer(layer).data for layer in instance.layers]}

    def create(self, validated_data):
        return DmfaParams(tuple(
            LayerParams(
                np.array(layer['weights'], dtype=float),
                np.array(layer['means'], dtype=float),
                np.array(layer['loadings'], dtype=float),
                np.array(layer['noise'], dtype=float),
            )
            for layer in validated_data['layers']
        ))


class PriorHyperSerializer(serializers.Serializer):
    mean_scale = serializers.FloatField(min_value=1e-12, default=1.0)
    noise_scale = serializers.FloatField(min_value=1e-12, default=1.0)
    horseshoe_scale = serializers.FloatField(min_value=1e-12, default=1.0)
    dirichlet = serializers.ListField(
        child=serializers.FloatField(min_value=1e-12), required=False, allow_null=True, allow_empty=False,
    )

    def to_representation(self, instance):
        return {
            'mean_scale': instance.mean_scale,
            'noise_scale': instance.noise_scale,
            'horseshoe_scale': instance.horseshoe_scale,
            'dirichlet': None if instance.dirichlet is None else list(instance.dirichlet),
        }

    def create(self, validated_data):
        dirichlet = validated_data.get('dirichlet')
        return PriorHyper(
            mean_scale=validated_data['mean_scale'],
            noise_scale=validated_data['noise_scale'],
            horseshoe_scale=validated_data['horseshoe_scale'],
            dirichlet=None if dirichlet is None else tuple(dirichlet),
        )
