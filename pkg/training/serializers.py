"""
Validation of training TOML files.

Each table has its own serializer; keys left out fall back to the dataclass
defaults in ``training.config``.
"""
import hashlib

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

from rest_framework import serializers

from densification.config import ManagementConfig
from objectives.breakdown import LossWeights
from sdf.volume import EXP_TRANSMITTANCE, PRODUCT_TRANSMITTANCE
from splatting.projection import RenderSettings
from surfels.exceptions import ConfigError, InvalidArgument
from surfels.serializers import StrictSerializer, validate_config
from surfels.types import RenderMode

from .config import OptimizerConfig, OutputConfig, SdfConfig, StagePlan, TrainConfig


def _iterations(**kwargs):
    return serializers.IntegerField(min_value=0, required=False, **kwargs)


def _weight():
    return serializers.FloatField(min_value=0.0, required=False)


def _positive():
    return serializers.FloatField(min_value=0.0, required=False)


class StagePlanSerializer(StrictSerializer):
    stage1_iterations = serializers.IntegerField(min_value=1, required=False)
    stage2_iterations = serializers.IntegerField(min_value=1, required=False)
    stage3_iterations = serializers.IntegerField(min_value=1, required=False)
    manage_iterations = serializers.IntegerField(min_value=1, required=False)
    densify_from = _iterations()
    densify_until = _iterations()
    separate_from = _iterations()
    separate_until = _iterations()
    prune_from = _iterations()
    prune_until = _iterations()
    manage_lambda_n_from = _iterations()
    warmup_densify_from = _iterations()
    warmup_densify_until = _iterations()
    core_sh_order = serializers.IntegerField(min_value=0, max_value=3, required=False)


class LossWeightsSerializer(StrictSerializer):
    ssim = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    curv = _weight()
    opac = _weight()
    mask = _weight()
    lambda_n_start = _weight()
    lambda_n_end = _weight()
    lambda_s_start = _weight()
    lambda_s_end = _weight()
    refine_lambda_n = _weight()
    refine_lambda_s = _weight()
    manage_lambda_n = _weight()
    vol = _weight()
    conf = _weight()
    entropy = _weight()
    zeta_rad = _weight()
    zeta_geo = _weight()
    eikonal = _weight()
    volume_color = _weight()
    conf_g = _weight()


class ManagementSerializer(StrictSerializer):
    densify_grad_threshold = _positive()
    densify_interval = serializers.IntegerField(min_value=1, required=False)
    percent_dense = _positive()
    split_divisor = serializers.FloatField(min_value=1.0, required=False)
    clone_step = _positive()
    separate_step = _positive()
    sh_threshold_low = _positive()
    sh_threshold_high = _positive()
    sh_interval = serializers.IntegerField(min_value=1, required=False)
    fixed_sh_order = serializers.IntegerField(min_value=0, max_value=3, required=False, allow_null=True)
    prune_percent = serializers.FloatField(min_value=0.0, max_value=99.999, required=False)
    prune_interval = serializers.IntegerField(min_value=1, required=False)
    opacity_floor = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    max_surfels = serializers.IntegerField(min_value=1, required=False)


class OptimizerSerializer(StrictSerializer):
    position_lr = _positive()
    position_lr_final_factor = _positive()
    sh_lr = _positive()
    opacity_lr = _positive()
    scaling_lr = _positive()
    rotation_lr = _positive()
    confidence_lr = _positive()
    sdf_grid_lr = _positive()
    sharpness_lr = _positive()
    beta1 = serializers.FloatField(min_value=0.0, max_value=0.999999, required=False)
    beta2 = serializers.FloatField(min_value=0.0, max_value=0.999999, required=False)
    eps = _positive()


class SdfSerializer(StrictSerializer):
    resolution = serializers.IntegerField(min_value=2, max_value=512, required=False)
    sharpness = serializers.FloatField(min_value=1e-6, required=False)
    init_radius = serializers.FloatField(min_value=1e-6, required=False, allow_null=True)
    rays_per_step = serializers.IntegerField(min_value=1, required=False)
    n_coarse = serializers.IntegerField(min_value=1, required=False)
    n_fine = serializers.IntegerField(min_value=0, required=False)
    band = _positive()
    eikonal_points = serializers.IntegerField(min_value=1, required=False)
    transmittance = serializers.ChoiceField(choices=(EXP_TRANSMITTANCE, PRODUCT_TRANSMITTANCE), required=False)
    render_chunk = serializers.IntegerField(min_value=1, required=False)


class RenderSerializer(StrictSerializer):
    alpha_min = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    alpha_max = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    dilation = serializers.FloatField(min_value=0.0, required=False)
    coverage_eps = _positive()
    grazing_eps = _positive()
    footprint_sigma = serializers.FloatField(min_value=0.5, required=False)
    tile_size = serializers.IntegerField(min_value=1, required=False)


class OutputSerializer(StrictSerializer):
    log_every = serializers.IntegerField(min_value=1, required=False)
    checkpoint_every = serializers.IntegerField(min_value=0, required=False)
    eval_opacity_floor = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)


class SceneRefSerializer(StrictSerializer):
    path = serializers.CharField(required=False, allow_null=True)


class ConfidenceSerializer(StrictSerializer):
    enabled = serializers.BooleanField(required=False)


class TrainConfigSerializer(StrictSerializer):
    """A whole training TOML file."""
    seed = serializers.IntegerField(min_value=0, required=False)
    scale = serializers.FloatField(min_value=1e-6, required=False)
    initial_surfels = serializers.IntegerField(min_value=1, required=False)
    render_mode = serializers.ChoiceField(choices=[m.value for m in RenderMode], required=False)
    dtype = serializers.ChoiceField(choices=('float32', 'float64'), required=False)
    scene = SceneRefSerializer(required=False)
    confidence = ConfidenceSerializer(required=False)
    stages = StagePlanSerializer(required=False)
    loss = LossWeightsSerializer(required=False)
    management = ManagementSerializer(required=False)
    optimizer = OptimizerSerializer(required=False)
    sdf = SdfSerializer(required=False)
    render = RenderSerializer(required=False)
    output = OutputSerializer(required=False)


SECTIONS = {
    'stages': StagePlan,
    'loss': LossWeights,
    'management': ManagementConfig,
    'optimizer': OptimizerConfig,
    'sdf': SdfConfig,
    'render': RenderSettings,
    'output': OutputConfig,
}


def _build(name, cls, values):
    try:
        return cls(**values)
    except InvalidArgument as exc:
        raise ConfigError(f'{name}: {exc}', field=name) from exc


def config_from_dict(data):
    """Validate a parsed TOML document and build its ``TrainConfig``."""
    attrs = validate_config(TrainConfigSerializer, data)
    values = {key: attrs[key] for key in ('seed', 'scale', 'initial_surfels', 'render_mode', 'dtype') if key in attrs}
    if 'scene' in attrs and attrs['scene'].get('path'):
        values['scene_path'] = attrs['scene']['path']
    if 'confidence' in attrs and 'enabled' in attrs['confidence']:
        values['confidence'] = attrs['confidence']['enabled']
    for name, cls in SECTIONS.items():
        values[name] = _build(name, cls, dict(attrs.get(name, {})))
    config = _build('config', TrainConfig, values)
    # the scaled plan must validate too
    _build('scale', lambda: config.plan, {})
    return config


def read_toml(path):
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f'cannot read config {path}: {exc.strerror}') from exc
    try:
        return tomllib.loads(text.decode('utf-8')), text
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f'{path}: {exc}') from exc


def load_config(path):
    """(TrainConfig, sha256 of the file bytes) for a training TOML file."""
    document, raw = read_toml(path)
    return config_from_dict(document), hashlib.sha256(raw).hexdigest()
