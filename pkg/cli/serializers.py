"""
Validation of run configuration sections.

Values arrive as strings from the INI file or as typed command-line
overrides; the fields cast and bound them.
"""
from rest_framework import serializers

from basis.specs import BasisFamily
from simlab.services import TRANSFORMS


class BasisSectionSerializer(serializers.Serializer):
    family = serializers.ChoiceField(choices=BasisFamily.choices(), default=BasisFamily.LEGENDRE.value)
    dimension = serializers.IntegerField(min_value=1, default=10)
    domain = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2,
                                   required=False, allow_null=True)
    degree = serializers.IntegerField(min_value=0, default=3)
    period = serializers.FloatField(required=False, allow_null=True, min_value=0.0)
    seasonal_dimension = serializers.IntegerField(min_value=0, default=0)

    def validate(self, attrs):
        family = attrs['family']
        if family in (BasisFamily.SEASONAL_BSPLINE.value, BasisFamily.COMPOSITE.value) and not attrs.get('period'):
            raise serializers.ValidationError("seasonal and composite bases need basis.period")
        if family == BasisFamily.COMPOSITE.value and not 0 < attrs['seasonal_dimension'] < attrs['dimension']:
            raise serializers.ValidationError("composite bases need 0 < basis.seasonal_dimension < basis.dimension")
        return attrs


class ArchitectureSectionSerializer(serializers.Serializer):
    components = serializers.ListField(child=serializers.IntegerField(min_value=1), default=[4, 2])
    factor_dims = serializers.ListField(child=serializers.IntegerField(min_value=1), default=[4, 1])
    # "components/factor_dims" entries separated by semicolons, e.g. "4,2/4,1; 6/3"
    candidates = serializers.CharField(required=False, allow_blank=True, default='')

    def validate(self, attrs):
        if len(attrs['components']) != len(attrs['factor_dims']):
            raise serializers.ValidationError("architecture.components and architecture.factor_dims differ in length")
        return attrs


class FitSectionSerializer(serializers.Serializer):
    max_iterations = serializers.IntegerField(min_value=0, default=1000)
    minibatch_size = serializers.IntegerField(min_value=0, default=0)
    step_scale = serializers.FloatField(min_value=1e-12, default=1.0)
    step_delay = serializers.FloatField(min_value=0.0, default=10.0)
    step_power = serializers.FloatField(min_value=0.0, default=0.75)
    local_tolerance = serializers.FloatField(min_value=1e-15, default=1e-6)
    local_max_sweeps = serializers.IntegerField(min_value=1, default=25)
    prune_threshold = serializers.FloatField(min_value=0.0, max_value=0.999, default=1e-3)
    ridge = serializers.FloatField(min_value=1e-12, default=0.1)
    log_every = serializers.IntegerField(min_value=0, default=100)
    short_iterations = serializers.IntegerField(min_value=1, default=100)


class PriorSectionSerializer(serializers.Serializer):
    mean_scale = serializers.FloatField(min_value=1e-12, default=1.0)
    noise_scale = serializers.FloatField(min_value=1e-12, default=1.0)
    horseshoe_scale = serializers.FloatField(min_value=1e-12, default=1.0)
    dirichlet = serializers.ListField(child=serializers.FloatField(min_value=1e-12), required=False,
                                      allow_null=True, allow_empty=True)


class IoSectionSerializer(serializers.Serializer):
    data = serializers.CharField(required=False, allow_blank=True, default='')
    samples = serializers.CharField(required=False, allow_blank=True, default='')
    bundle = serializers.CharField(required=False, allow_blank=True, default='')
    out = serializers.CharField(default='out')
    transform = serializers.ChoiceField(choices=list(TRANSFORMS), default='identity')


class PredictSectionSerializer(serializers.Serializer):
    grid = serializers.ListField(child=serializers.FloatField(), required=False, allow_empty=True)
    grid_points = serializers.IntegerField(min_value=1, default=50)
    levels = serializers.ListField(child=serializers.FloatField(min_value=1e-6, max_value=1 - 1e-6),
                                   default=[0.95], min_length=1)
    threshold = serializers.FloatField(required=False, allow_null=True)
    cdf_values = serializers.ListField(child=serializers.FloatField(), required=False, allow_empty=True)
    subject = serializers.CharField(required=False, allow_blank=True, default='')
    series = serializers.CharField(required=False, allow_blank=True, default='')

    def validate_grid(self, grid):
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise serializers.ValidationError("predict.grid must be strictly increasing")
        return grid


class SimulateSectionSerializer(serializers.Serializer):
    # Unknown names are reported by the generator registry
    generator = serializers.CharField(default='dgp1')
    subjects = serializers.IntegerField(min_value=1, required=False, allow_null=True)
    holdout = serializers.IntegerField(min_value=0, default=0)
    replicates = serializers.IntegerField(min_value=1, default=1)
    count = serializers.IntegerField(min_value=1, default=7500)
    length = serializers.IntegerField(min_value=2, default=128)
    period = serializers.IntegerField(min_value=2, default=12)
    reject = serializers.BooleanField(default=True)
    case_threshold = serializers.FloatField(default=100.0)


class ConflictSectionSerializer(serializers.Serializer):
    split = serializers.IntegerField(min_value=1, required=False, allow_null=True)
    prior_draws = serializers.IntegerField(min_value=100, default=1000)
    kl_samples = serializers.IntegerField(min_value=1000, default=5000)


class EvaluateSectionSerializer(serializers.Serializer):
    levels = serializers.ListField(child=serializers.FloatField(min_value=1e-6, max_value=1 - 1e-6),
                                   default=[0.05, 0.5, 0.95])
    hdr_levels = serializers.ListField(child=serializers.FloatField(min_value=1e-6, max_value=1 - 1e-6),
                                       default=[round(0.1 * i, 1) for i in range(1, 10)])
    hdr_samples = serializers.IntegerField(min_value=100, default=100_000)
    k_neighbors = serializers.IntegerField(min_value=1, default=100)
    train = serializers.IntegerField(min_value=1, default=5000)
    split = serializers.IntegerField(min_value=1, default=80)


class RunConfigSerializer(serializers.Serializer):
    """The whole [settings] section, grouped by key prefix"""
    seed = serializers.IntegerField(min_value=0, error_messages={
        'required': 'seed is required: set it in the config file or pass --seed',
    })
    threads = serializers.IntegerField(min_value=1, default=1)
    basis = BasisSectionSerializer()
    architecture = ArchitectureSectionSerializer()
    fit = FitSectionSerializer()
    prior = PriorSectionSerializer()
    io = IoSectionSerializer()
    predict = PredictSectionSerializer()
    simulate = SimulateSectionSerializer()
    conflict = ConflictSectionSerializer()
    evaluate = EvaluateSectionSerializer()


class FitBundleSerializer(serializers.Serializer):
    """Envelope of a fit bundle; the parts are validated by their own serializers."""
    format = serializers.ChoiceField(choices=['dmlmm-fit'])
    version = serializers.IntegerField(min_value=1, max_value=1)
    architecture = serializers.DictField()
    basis = serializers.DictField()
    plugin = serializers.DictField()
    state = serializers.DictField()
    diagnostics = serializers.DictField()
    config = serializers.DictField(required=False, default=dict)
    elbo_trace = serializers.ListField(child=serializers.FloatField(allow_null=True))
