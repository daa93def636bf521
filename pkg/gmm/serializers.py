"""
JSON schema for Gaussian mixtures:
{weights: [...], means: [[...]], covariances: [[[...]]]}, row-major matrices.
"""
import numpy as np
from rest_framework import serializers

from .mixture import GaussianMixture


class MatrixField(serializers.ListField):
    """A list of float rows."""

    child = serializers.ListField(child=serializers.FloatField())


class GaussianMixtureSerializer(serializers.Serializer):
    """Serializer for GaussianMixture values"""
    weights = serializers.ListField(child=serializers.FloatField(), allow_empty=False)
    means = MatrixField(allow_empty=False)
    covariances = serializers.ListField(child=MatrixField(), allow_empty=False)

    def to_representation(self, instance):
        return {
            'weights': [float(w) for w in instance.weights],
            'means': np.asarray(instance.means, dtype=float).tolist(),
            'covariances': np.asarray(instance.covariances, dtype=float).tolist(),
        }

    def validate(self, attrs):
        n_components = len(attrs['weights'])
        if len(attrs['means']) != n_components or len(attrs['covariances']) != n_components:
            raise serializers.ValidationError(
                "weights, means and covariances must list the same number of components"
            )
        dims = {len(row) for row in attrs['means']}
        if len(dims) != 1:
            raise serializers.ValidationError("all means must share one dimension")
        dim = dims.pop()
        for cov in attrs['covariances']:
            if len(cov) != dim or any(len(row) != dim for row in cov):
                raise serializers.ValidationError(f"covariances must be {dim}x{dim}")
        return attrs

    def create(self, validated_data):
        return GaussianMixture(
            np.array(validated_data['weights'], dtype=float),
            np.array(validated_data['means'], dtype=float),
            np.array(validated_data['covariances'], dtype=float),
        )
