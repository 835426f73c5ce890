from rest_framework import serializers

from .services import Cpdag, pair


class EdgeField(serializers.ListField):
    child = serializers.CharField()

    def __init__(self, **kwargs):
        super().__init__(min_length=2, max_length=2, **kwargs)


class SepsetSerializer(serializers.Serializer):
    pair = EdgeField()
    set = serializers.ListField(child=serializers.CharField())


class CpdagSerializer(serializers.Serializer):
    """
    JSON form of a CPDAG.

    Serialize from ``Cpdag.to_dict()``; ``save()`` on validated input
    rebuilds the ``Cpdag``.
    """

    nodes = serializers.ListField(child=serializers.CharField(), min_length=1)
    directed = serializers.ListField(child=EdgeField())
    undirected = serializers.ListField(child=EdgeField())
    sepsets = SepsetSerializer(many=True, required=False)
    conflicts = serializers.ListField(child=serializers.CharField(), required=False)

    def validate(self, data):
        nodes = set(data["nodes"])
        # every edge endpoint must be a declared node
        for edge in data["directed"] + data["undirected"]:
            unknown = set(edge) - nodes
            if unknown:
                raise serializers.ValidationError(f"edge {edge} uses unknown nodes {sorted(unknown)}")
        return data

    def create(self, validated_data):
        return Cpdag(
            nodes=tuple(validated_data["nodes"]),
            directed={tuple(edge) for edge in validated_data["directed"]},
            undirected={pair(*edge) for edge in validated_data["undirected"]},
            sepsets={
                pair(*item["pair"]): tuple(item["set"])
                for item in validated_data.get("sepsets", [])
            },
            conflicts=list(validated_data.get("conflicts", [])),
        )
