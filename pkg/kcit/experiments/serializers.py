import logging

from rest_framework import serializers

from causal.serializers import CpdagSerializer
from citest.serializers import CITestReportSerializer
from kcit.config import METHODS, KciConfig
from uitest.serializers import UITestReportSerializer

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"

COMMANDS = ("test-ui", "test-ci", "pc", "gen", "calibrate", "dag-bench")
ORACLE_CHOICES = ("kci", "pcorr")


class RunConfigSerializer(serializers.Serializer):
    """
    Validates the options shared by every command.

    Options left unset fall back to ``settings.KCI_CONFIG`` when the
    ``KciConfig`` is built.
    """

    command = serializers.ChoiceField(choices=COMMANDS)
    alpha = serializers.FloatField(required=False, allow_null=True)
    method = serializers.ChoiceField(choices=METHODS, required=False, allow_null=True)
    mc_draws = serializers.IntegerField(min_value=100, required=False, allow_null=True)
    seed = serializers.IntegerField(min_value=0, required=False, allow_null=True)
    workers = serializers.IntegerField(min_value=1, required=False, allow_null=True)
    x = serializers.ListField(child=serializers.CharField(), required=False)
    y = serializers.ListField(child=serializers.CharField(), required=False)
    z = serializers.ListField(child=serializers.CharField(), required=False)
    max_cond = serializers.IntegerField(min_value=0, required=False, allow_null=True)
    oracle = serializers.ChoiceField(choices=ORACLE_CHOICES, required=False)
    out = serializers.CharField(required=False, allow_null=True)

    def validate_alpha(self, value):
        if value is not None and not 0 < value < 1:
            raise serializers.ValidationError("alpha must lie strictly between 0 and 1.")
        return value

    def validate(self, data):
        command = data["command"]

        # Validation Rule 1: the two tests need both variable groups
        if command in ("test-ui", "test-ci"):
            if not data.get("x") or not data.get("y"):
                raise serializers.ValidationError("--x and --y are required.")

        # Validation Rule 2: a column may sit in one group only
        groups = [set(data.get(name) or ()) for name in ("x", "y", "z")]
        for i in range(3):
            for j in range(i + 1, 3):
                shared = groups[i] & groups[j]
                if shared:
                    raise serializers.ValidationError(
                        f"columns {sorted(shared)} appear in more than one of --x/--y/--z."
                    )

        logger.debug(f"Validated run config for {command}")
        return data

    def kci_config(self) -> KciConfig:
        data = self.validated_data
        return KciConfig.from_settings(
            method=data.get("method"),
            mc_draws=data.get("mc_draws"),
            seed=data.get("seed"),
            alpha=data.get("alpha"),
            workers=data.get("workers"),
        )


class TestReportSerializer(serializers.Serializer):
    """
    Envelope of every JSON report: schema version, the command and its
    arguments, and the result. The result is a test report or a CPDAG.
    """

    schema_version = serializers.CharField()
    command = serializers.ChoiceField(choices=COMMANDS)
    arguments = serializers.DictField()
    result = serializers.DictField()
    decision = serializers.DictField(required=False)
    summary = serializers.DictField(required=False)

    def validate_schema_version(self, value):
        if value != SCHEMA_VERSION:
            raise serializers.ValidationError(f"unsupported schema version {value}")
        return value

    def validate(self, data):
        result_serializer = result_serializer_for(data["command"], data["result"])
        if not result_serializer.is_valid():
            raise serializers.ValidationError({"result": result_serializer.errors})
        return data


def result_serializer_for(command: str, result: dict) -> serializers.Serializer:
    if command == "pc":
        return CpdagSerializer(data=result)
    if result.get("test") == "conditional":
        return CITestReportSerializer(data=result)
    return UITestReportSerializer(data=result)


def build_report(command: str, arguments: dict, result, include_timings: bool = False) -> dict:
    """Serialize a report object (UI/CI report or ``Cpdag``) into the envelope."""
    if command == "pc":
        body = CpdagSerializer(result.to_dict()).data
    else:
        context = {"include_timings": include_timings}
        serializer_class = (
            CITestReportSerializer if result.test == "conditional" else UITestReportSerializer
        )
        body = serializer_class(result, context=context).data
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "arguments": arguments,
        "result": dict(body),
    }
