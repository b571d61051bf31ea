# experiments/forms.py
"""
Validation of JSON experiment configs.

Each config section is checked by its own form. The first problem found
becomes a typed ConfigError carrying the dotted key path, e.g.
``sampler.batch``.
"""

from dataclasses import asdict

from django import forms

from networks.exceptions import DescriptorError
from networks.nets import architecture_from_descriptor

from .dynamics import SYSTEMS
from .exceptions import MissingKeyError, RangeError, UnknownKeyError
from .presets import PRESETS, deep_merge, get_preset
from .targets import TARGET_CHOICES
from .train import (MODE_CHOICES, ExperimentConfig, FIT, OptimizerConfig, RoaConfig, SamplerConfig,
                    SYNTHESIZE, WarmStartConfig)

SECTIONS = ('sampler', 'optimizer', 'warm_start', 'roa')
DESCRIPTORS = ('lyapunov', 'controller')
OPTIMIZER_ROLES = ('lyapunov', 'controller')


class PositiveFloatField(forms.FloatField):
    """
    FloatField rejecting zero and negative values
    """

    def validate(self, value):
        super().validate(value)
        if value is not None and value <= 0:
            raise forms.ValidationError("Ensure this value is greater than 0.", code='min_value')


class SamplerForm(forms.Form):
    half_width = PositiveFloatField()
    batch = forms.IntegerField(min_value=1)
    cutoff_radius = forms.FloatField(min_value=0.0)

    def clean(self):
        cleaned_data = super().clean()
        half_width = cleaned_data.get('half_width')
        cutoff = cleaned_data.get('cutoff_radius')
        if half_width is not None and cutoff is not None and cutoff >= half_width:
            self.add_error('cutoff_radius', forms.ValidationError(
                "Cutoff radius must be smaller than the box half-width.",
                code='range'
            ))
        return cleaned_data


class OptimizerForm(forms.Form):
    lr = PositiveFloatField()
    warmup_steps = forms.IntegerField(min_value=0)
    weight_decay = forms.FloatField(min_value=0.0)
    beta1 = forms.FloatField(min_value=0.0, max_value=0.999999)
    beta2 = forms.FloatField(min_value=0.0, max_value=0.999999999)
    eps = PositiveFloatField()


class WarmStartForm(forms.Form):
    enabled = forms.BooleanField(required=False)
    steps = forms.IntegerField(min_value=0)
    lr = PositiveFloatField()
    batch = forms.IntegerField(min_value=1)


class RoaForm(forms.Form):
    grid = forms.IntegerField(min_value=1)
    half_width = PositiveFloatField()
    circle_radius = PositiveFloatField(required=False)
    circle_count = forms.IntegerField(min_value=1)
    dt = PositiveFloatField()
    t_max = PositiveFloatField()
    conv_tol = PositiveFloatField()


class ExperimentForm(forms.Form):
    mode = forms.ChoiceField(choices=[(m, m) for m in MODE_CHOICES])
    steps = forms.IntegerField(min_value=0)
    seed = forms.IntegerField(min_value=0)
    target = forms.ChoiceField(choices=[(t, t) for t in TARGET_CHOICES], required=False)
    system = forms.ChoiceField(choices=[(s, s) for s in sorted(SYSTEMS)], required=False)
    margin = forms.FloatField(min_value=0.0)
    log_every = forms.IntegerField(min_value=0)
    snapshot_every = forms.IntegerField(min_value=0)
    snapshot_grid = forms.IntegerField(min_value=8)
    eval_samples = forms.IntegerField(min_value=1)

    def clean(self):
        cleaned_data = super().clean()
        mode = cleaned_data.get('mode')
        if mode == FIT and not cleaned_data.get('target'):
            self.add_error('target', forms.ValidationError(
                "A fit run needs a target field.", code='required'))
        if mode == SYNTHESIZE and not cleaned_data.get('system'):
            self.add_error('system', forms.ValidationError(
                "A synthesis run needs a system.", code='required'))
        return cleaned_data


def _defaults():
    return {
        'seed': 0,
        'target': None,
        'system': None,
        'controller': None,
        'margin': 0.0,
        'log_every': 100,
        'snapshot_every': 0,
        'snapshot_grid': 21,
        'eval_samples': 10000,
        'sampler': asdict(SamplerConfig()),
        'optimizer': {role: asdict(OptimizerConfig()) for role in OPTIMIZER_ROLES},
        'warm_start': asdict(WarmStartConfig()),
        'roa': asdict(RoaConfig()),
    }


def _join(prefix, key):
    return f"{prefix}.{key}" if prefix else key


def _check_keys(data, allowed, prefix):
    if not isinstance(data, dict):
        raise RangeError(prefix, "must be an object")
    for key in data:
        if key not in allowed:
            raise UnknownKeyError(_join(prefix, key), "unknown key")


def _validate(form_class, data, prefix):
    _check_keys(data, form_class.base_fields, prefix)
    form = form_class(data={k: v for k, v in data.items() if v is not None})
    if form.is_valid():
        return form.cleaned_data
    errors = form.errors.as_data()
    for name in list(form.fields) + ['__all__']:
        if name in errors:
            error = errors[name][0]
            message = ' '.join(error.messages)
            key_path = prefix if name == '__all__' else _join(prefix, name)
            if error.code == 'required':
                raise MissingKeyError(key_path, "missing required key")
            raise RangeError(key_path, message)
    raise RangeError(prefix, "invalid section")


def _validate_descriptor(descriptor, key_path):
    try:
        return architecture_from_descriptor(descriptor)
    except DescriptorError as exc:
        path = _join(key_path, exc.key) if exc.key else key_path
        if exc.reason == 'missing':
            raise MissingKeyError(path, str(exc)) from None
        if exc.reason == 'unknown':
            raise UnknownKeyError(path, str(exc)) from None
        raise RangeError(path, str(exc)) from None


def build_config(data, preset=None, seed=None) -> ExperimentConfig:
    """
    Validate a config dict, overlaid on ``preset`` when one is named either
    as an argument or under the ``preset`` key.
    """
    allowed = set(ExperimentForm.base_fields) | set(SECTIONS) | set(DESCRIPTORS) | {'preset'}
    _check_keys(data, allowed, '')
    preset = preset or data.get('preset')
    merged = _defaults()
    if preset:
        if preset not in PRESETS:
            raise RangeError('preset', f"unknown preset '{preset}'")
        merged = deep_merge(merged, get_preset(preset))
    merged = deep_merge(merged, {k: v for k, v in data.items() if k != 'preset'})
    # a descriptor given in the config replaces the preset's instead of overlaying it
    for key in DESCRIPTORS:
        if data.get(key) is not None:
            merged[key] = data[key]
    if seed is not None:
        merged['seed'] = seed

    top = _validate(ExperimentForm, {k: merged.get(k) for k in ExperimentForm.base_fields}, '')
    sampler = _validate(SamplerForm, merged['sampler'], 'sampler')
    warm_start = _validate(WarmStartForm, merged['warm_start'], 'warm_start')
    roa = _validate(RoaForm, merged['roa'], 'roa')
    _check_keys(merged['optimizer'], OPTIMIZER_ROLES, 'optimizer')
    optimizer = {
        role: OptimizerConfig(**_validate(OptimizerForm, merged['optimizer'][role], f'optimizer.{role}'))
        for role in OPTIMIZER_ROLES
    }

    if 'lyapunov' not in merged:
        raise MissingKeyError('lyapunov', "missing required key")
    V_arch = _validate_descriptor(merged['lyapunov'], 'lyapunov')
    if V_arch.output_dim != 1:
        raise RangeError('lyapunov', "the Lyapunov network must have a scalar output")
    controller = merged.get('controller')

    if top['mode'] == SYNTHESIZE:
        system = SYSTEMS[top['system']]
        if V_arch.input_dim != system.state_dim:
            raise RangeError('lyapunov.dim', f"system '{system.name}' has {system.state_dim} states")
        if controller is not None:
            u_arch = _validate_descriptor(controller, 'controller')
            if u_arch.input_dim != system.state_dim or u_arch.output_dim != system.input_dim:
                raise RangeError('controller.layer_widths',
                                 f"controller must map {system.state_dim} states to {system.input_dim} inputs")
        if sampler['cutoff_radius'] >= sampler['half_width']:
            raise RangeError('sampler.cutoff_radius', "must be smaller than the box half-width")
        if roa['circle_radius'] and system.state_dim != 2:
            raise RangeError('roa.circle_radius', "circle initial states need a planar system")
    elif V_arch.input_dim != 2:
        raise RangeError('lyapunov.dim', "target fields are defined on the plane")

    return ExperimentConfig(
        mode=top['mode'],
        lyapunov=dict(merged['lyapunov']),
        controller=dict(controller) if controller is not None else None,
        steps=top['steps'],
        seed=top['seed'],
        target=top['target'] or None,
        system=top['system'] or None,
        margin=top['margin'],
        sampler=SamplerConfig(**sampler),
        optimizer=optimizer,
        warm_start=WarmStartConfig(**warm_start),
        roa=RoaConfig(**roa),
        log_every=top['log_every'],
        snapshot_every=top['snapshot_every'],
        snapshot_grid=top['snapshot_grid'],
        eval_samples=top['eval_samples'],
        preset=preset or None,
    )


def config_from_preset(name, seed=None, **overrides) -> ExperimentConfig:
    return build_config(overrides, preset=name, seed=seed)


