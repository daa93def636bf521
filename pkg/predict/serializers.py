from rest_framework import serializers

from basis.serializers import BasisSpecSerializer
from gmm.serializers import GaussianMixtureSerializer
from .plugin import PluginParams


class PluginParamsSerializer(serializers.Serializer):
    """Serializer for the plug-in estimate stored in fit bundles"""
    beta_prior = GaussianMixtureSerializer()
    sigma2 = serializers.FloatField(min_value=0.0)
    basis = BasisSpecSerializer()

    def to_representation(self, instance):
        return {
            'beta_prior': GaussianMixtureSerializer(instance.beta_prior).data,
            'sigma2': instance.sigma2,
            'basis': BasisSpecSerializer(instance.basis).data,
        }

    def create(self, validated_data):
        return PluginParams(
            beta_prior=GaussianMixtureSerializer().create(validated_data['beta_prior']),
            sigma2=validated_data['sigma2'],
            basis=BasisSpecSerializer().create(validated_data['basis']),
        )


class ConflictReportSerializer(serializers.Serializer):
    """Schema of the prior-data conflict report"""
    p = serializers.FloatField(min_value=0.0, max_value=1.0)
    G_observed = serializers.FloatField()
    n_prior_draws = serializers.IntegerField(min_value=100)
    kl_se = serializers.FloatField(min_value=0.0)
