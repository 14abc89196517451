from rest_framework import serializers

from surfels.serializers import StrictSerializer, Vector3Field, validate_config

from .oracle import CameraRing, NormalCorruption, SceneSpec
from .shapes import SHAPE_KINDS, SPHERE, Material, build_shape


class ShapeSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=SHAPE_KINDS)
    center = Vector3Field(default=[0.0, 0.0, 0.0])
    radius = serializers.FloatField(min_value=1e-6, required=False)
    half_extents = Vector3Field(required=False)
    albedo = Vector3Field(default=[0.7, 0.7, 0.7])
    specular = serializers.FloatField(min_value=0.0, default=0.0)
    shininess = serializers.FloatField(min_value=1.0, default=32.0)

    def validate_albedo(self, value):
        if any(not 0.0 <= c <= 1.0 for c in value):
            raise serializers.ValidationError('Albedo components must lie in [0, 1].')
        return value

    def validate_half_extents(self, value):
        if min(value) <= 0:
            raise serializers.ValidationError('Half extents must be positive.')
        return value

    def validate(self, attrs):
        if attrs['kind'] == SPHERE and 'radius' not in attrs:
            raise serializers.ValidationError({'radius': ['This field is required for spheres.']})
        if attrs['kind'] != SPHERE and 'half_extents' not in attrs:
            raise serializers.ValidationError({'half_extents': ['This field is required for boxes.']})
        return attrs


class CameraRingSerializer(StrictSerializer):
    count = serializers.IntegerField(min_value=1)
    radius = serializers.FloatField(min_value=1e-3)
    elevation = serializers.FloatField(min_value=-89.0, max_value=89.0, default=20.0)
    mirror_elevation = serializers.BooleanField(default=False)
    width = serializers.IntegerField(min_value=1)
    height = serializers.IntegerField(min_value=1)
    fov = serializers.FloatField(min_value=1.0, max_value=170.0, default=40.0)
    near = serializers.FloatField(min_value=1e-6, default=0.1)
    far = serializers.FloatField(min_value=1e-6, default=10.0)

    def validate(self, attrs):
        if attrs['near'] >= attrs['far']:
            raise serializers.ValidationError({'far': ['Must be greater than near.']})
        return attrs


class PixelRangeField(serializers.ListField):
    def __init__(self, **kwargs):
        super().__init__(child=serializers.IntegerField(min_value=0), min_length=2, max_length=2, **kwargs)


class CorruptionSerializer(StrictSerializer):
    rows = PixelRangeField()
    cols = PixelRangeField()
    angle = serializers.FloatField(default=60.0)
    views = serializers.ListField(child=serializers.IntegerField(min_value=0), default=list)


class SceneSpecSerializer(StrictSerializer):
    """Scene description as written in a scene TOML file."""
    seed = serializers.IntegerField(min_value=0, default=0)
    test_every = serializers.IntegerField(min_value=0, default=0)
    ambient = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.2)
    light_direction = Vector3Field(default=[0.3, 0.8, 0.5])
    prior_noise = serializers.FloatField(min_value=0.0, default=0.0)
    max_steps = serializers.IntegerField(min_value=1, default=256)
    hit_epsilon = serializers.FloatField(min_value=0.0, default=1e-7)
    ring = CameraRingSerializer()
    shapes = ShapeSerializer(many=True, allow_empty=False)
    corruption = CorruptionSerializer(required=False)


def spec_from_config(data):
    """Validate a scene config dict and build its ``SceneSpec``."""
    attrs = validate_config(SceneSpecSerializer, data)
    shapes = []
    for shape in attrs['shapes']:
        material = Material(albedo=tuple(shape['albedo']), specular=shape['specular'], shininess=shape['shininess'])
        geometry = {key: shape[key] for key in ('center', 'radius', 'half_extents') if key in shape}
        shapes.append(build_shape(shape['kind'], material, **geometry))
    corruption = None
    if 'corruption' in attrs:
        c = attrs['corruption']
        corruption = NormalCorruption(rows=tuple(c['rows']), cols=tuple(c['cols']), angle=c['angle'],
                                      views=tuple(c['views']))
    return SceneSpec(
        shapes=tuple(shapes),
        ring=CameraRing(**attrs['ring']),
        light_direction=tuple(attrs['light_direction']),
        ambient=attrs['ambient'],
        seed=attrs['seed'],
        test_every=attrs['test_every'],
        prior_noise=attrs['prior_noise'],
        corruption=corruption,
        max_steps=attrs['max_steps'],
        hit_epsilon=attrs['hit_epsilon'],
    )


def spec_to_config(spec):
    """Inverse of ``spec_from_config``; the dict written to scene.json."""
    shapes = []
    for shape in spec.shapes:
        entry = {'kind': type(shape).__name__.lower(), 'center': list(shape.center),
                 'albedo': list(shape.material.albedo), 'specular': shape.material.specular,
                 'shininess': shape.material.shininess}
        if entry['kind'] == SPHERE:
            entry['radius'] = shape.radius
        else:
            entry['half_extents'] = list(shape.half_extents)
        shapes.append(entry)
    ring = spec.ring
    config = {
        'seed': spec.seed,
        'test_every': spec.test_every,
        'ambient': spec.ambient,
        'light_direction': list(spec.light_direction),
        'prior_noise': spec.prior_noise,
        'max_steps': spec.max_steps,
        'hit_epsilon': spec.hit_epsilon,
        'ring': {'count': ring.count, 'radius': ring.radius, 'elevation': ring.elevation,
                 'mirror_elevation': ring.mirror_elevation, 'width': ring.width, 'height': ring.height,
                 'fov': ring.fov, 'near': ring.near, 'far': ring.far},
        'shapes': shapes,
    }
    if spec.corruption is not None:
        c = spec.corruption
        config['corruption'] = {'rows': list(c.rows), 'cols': list(c.cols), 'angle': c.angle, 'views': list(c.views)}
    return config
