from rest_framework import serializers


class RunManifestSerializer(serializers.Serializer):
    """The manifest.json written at the end of every command."""
    command = serializers.CharField()
    config_hash = serializers.CharField(allow_blank=True)
    seed = serializers.IntegerField()
    version = serializers.CharField()
    started_at = serializers.DateTimeField()
    finished_at = serializers.DateTimeField()
    outputs = serializers.DictField(child=serializers.CharField())
    scene_checksum = serializers.CharField(required=False)
