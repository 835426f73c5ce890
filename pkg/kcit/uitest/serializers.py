from rest_framework import serializers

from nulldist.services import METHOD_GAMMA, METHOD_MONTE_CARLO


class PairField(serializers.ListField):
    def __init__(self, child, **kwargs):
        super().__init__(child=child, min_length=2, max_length=2, **kwargs)


class ReportSerializer(serializers.Serializer):
    """
    Fields shared by the unconditional and conditional reports.

    ``timings`` is only emitted when the context asks for it
    (``include_timings``) so seeded reports stay byte-identical.
    """

    test = serializers.CharField()
    statistic = serializers.FloatField(min_value=0.0)
    p_value = serializers.FloatField(min_value=0.0, max_value=1.0)
    p_values = serializers.DictField(child=serializers.FloatField(min_value=0.0, max_value=1.0))
    method = serializers.ChoiceField(choices=[METHOD_GAMMA, METHOD_MONTE_CARLO])
    n = serializers.IntegerField(min_value=2)
    null_mean = serializers.FloatField()
    null_variance = serializers.FloatField(min_value=0.0)
    degenerate = serializers.BooleanField()
    x_cols = serializers.ListField(child=serializers.CharField())
    y_cols = serializers.ListField(child=serializers.CharField())
    timings = serializers.DictField(child=serializers.FloatField(), required=False)

    def validate_p_value(self, value):
        # Validation Rule: a reported p-value lies in (0, 1]
        if value <= 0.0:
            raise serializers.ValidationError("p_value must be strictly positive.")
        return value

    def validate_p_values(self, value):
        for method, p in value.items():
            if method not in (METHOD_GAMMA, METHOD_MONTE_CARLO):
                raise serializers.ValidationError(f"unknown p-value method {method}.")
            if p <= 0.0:
                raise serializers.ValidationError(f"{method} p-value must be strictly positive.")
        return value

    def to_representation(self, instance):
        data = super().to_representation(instance)
        if not self.context.get("include_timings"):
            data.pop("timings", None)
        return data


class UITestReportSerializer(ReportSerializer):
    widths = PairField(child=serializers.FloatField())
    retained_eigs = PairField(child=serializers.IntegerField(min_value=0))
