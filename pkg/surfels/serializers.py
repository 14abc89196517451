"""
Config validation helpers shared by every app that reads a structured config.
"""
from rest_framework import serializers

from .exceptions import ConfigError


class StrictSerializer(serializers.Serializer):
    """Plain serializer that rejects keys it does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({name: ['Unknown field.'] for name in unknown})
        return super().to_internal_value(data)


class Vector3Field(serializers.ListField):
    def __init__(self, **kwargs):
        kwargs.setdefault('child', serializers.FloatField())
        super().__init__(min_length=3, max_length=3, **kwargs)


def _join(prefix, key):
    return f'{prefix}.{key}' if prefix else str(key)


def first_error(errors, prefix=''):
    """(dotted field path, message) of the first error in a DRF error tree."""
    if isinstance(errors, dict):
        for key, value in errors.items():
            path = prefix if key == 'non_field_errors' else _join(prefix, key)
            return first_error(value, path)
    if isinstance(errors, list):
        for index, item in enumerate(errors):
            if isinstance(item, (dict, list)):
                if item:
                    return first_error(item, _join(prefix, index))
                continue
            return prefix, str(item)
    return prefix, str(errors)


def validate_config(serializer_class, data, prefix=''):
    """Run ``serializer_class`` over ``data`` and return validated data or raise ``ConfigError``."""
    serializer = serializer_class(data=data)
    if not serializer.is_valid():
        field, message = first_error(serializer.errors, prefix)
        raise ConfigError(f'{field}: {message}' if field else message, field=field or None)
    return serializer.validated_data
