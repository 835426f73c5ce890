from rest_framework import serializers

from uitest.serializers import PairField, ReportSerializer


class CITestReportSerializer(ReportSerializer):
    cond_dim = serializers.IntegerField(min_value=0)
    z_cols = serializers.ListField(child=serializers.CharField())
    # widths, ridge parameters and GP diagnostics
    hyperparams = serializers.DictField()
    retained_null_weights = serializers.IntegerField(min_value=0, allow_null=True)
    retained_features = PairField(child=serializers.IntegerField(min_value=0))
    z_degenerate = serializers.BooleanField()
    jitter = PairField(child=serializers.FloatField(min_value=0.0))
