"""
Checkpoint documents for variational states.
"""
import numpy as np
from rest_framework import serializers

from basis.serializers import BasisSpecSerializer
from dmfa.serializers import DmfaArchitectureSerializer, PriorHyperSerializer
from .factors import InverseGamma
from .state import LayerFactors, VariationalState


class ArrayField(serializers.Field):
    """Nested lists of finite floats, any depth."""

    def to_representation(self, value):
        return np.asarray(value, dtype=float).tolist()

    def to_internal_value(self, data):
        try:
            array = np.array(data, dtype=float)
        except (TypeError, ValueError):
            raise serializers.ValidationError("expected a rectangular array of numbers")
        if not np.all(np.isfinite(array)):
            raise serializers.ValidationError("array entries must be finite")
        return array


class InverseGammaField(serializers.Field):
    """{shape: array, rate: array} with matching shapes."""

    def to_representation(self, value):
        return {'shape': np.asarray(value.shape).tolist(), 'rate': np.asarray(value.rate).tolist()}

    def to_internal_value(self, data):
        if not isinstance(data, dict) or set(data) != {'shape', 'rate'}:
            raise serializers.ValidationError("expected an object with shape and rate")
        shape = ArrayField().to_internal_value(data['shape'])
        rate = ArrayField().to_internal_value(data['rate'])
        if shape.shape != rate.shape or np.any(shape <= 0) or np.any(rate <= 0):
            raise serializers.ValidationError("shape and rate must be positive arrays of one shape")
        return InverseGamma(shape, rate)


class LayerFactorsSerializer(serializers.Serializer):
    coef_mean = ArrayField()
    coef_cov = ArrayField()
    noise = InverseGammaField()
    noise_mixing = InverseGammaField()
    mean_scale = InverseGammaField()
    local_scale = InverseGammaField()
    local_mixing = InverseGammaField()
    global_scale = InverseGammaField()
    global_mixing = InverseGammaField()
    dirichlet = ArrayField()

    def create(self, validated_data):
        return LayerFactors(**validated_data)


class VariationalStateSerializer(serializers.Serializer):
    """Everything needed to resume a fit at its iteration counter"""
    architecture = DmfaArchitectureSerializer(source='arch')
    hyper = PriorHyperSerializer()
    basis = BasisSpecSerializer()
    sigma2 = InverseGammaField()
    psi = InverseGammaField()
    layers = LayerFactorsSerializer(many=True)
    latent_mean = serializers.ListField(child=ArrayField())
    latent_var = serializers.ListField(child=ArrayField())
    resp = ArrayField()
    subject_ids = serializers.ListField(child=serializers.CharField())
    iteration = serializers.IntegerField(min_value=0)

    def validate_layers(self, layers):
        for layer in layers:
            if layer['coef_mean'].ndim != 3 or layer['coef_cov'].shape != layer['coef_mean'].shape + (
                    layer['coef_mean'].shape[2],):
                raise serializers.ValidationError("row coefficient arrays have inconsistent shapes")
        return layers

    def create(self, validated_data):
        return VariationalState(
            arch=DmfaArchitectureSerializer().create(validated_data['arch']),
            hyper=PriorHyperSerializer().create(validated_data['hyper']),
            basis=BasisSpecSerializer().create(validated_data['basis']),
            sigma2=validated_data['sigma2'],
            psi=validated_data['psi'],
            layers=[LayerFactorsSerializer().create(layer) for layer in validated_data['layers']],
            latent_mean=validated_data['latent_mean'],
            latent_var=validated_data['latent_var'],
            resp=validated_data['resp'],
            subject_ids=validated_data['subject_ids'],
            iteration=validated_data['iteration'],
        )
