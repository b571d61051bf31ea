# experiments/presets.py
"""
Named experiment configurations.

Desk-scale presets are sized for a laptop core; the ``-full`` variant
carries the full-size fitting run.
"""

import copy

POLARNET_2D = {'kind': 'polarnet', 'dim': 2, 'n_layers': 4, 'hidden': [12, 12], 'gain': 0.5}
CONTROLLER_2D = {'kind': 'mlp', 'layer_widths': [2, 32, 32, 2], 'has_bias': False, 'gain': 1.0}

FIG4_FIT = {
    'mode': 'fit',
    'target': 'eggcrate',
    'lyapunov': POLARNET_2D,
    'steps': 2000,
    'sampler': {'half_width': 1.0, 'batch': 1024, 'cutoff_radius': 0.0},
    'optimizer': {
        'lyapunov': {'lr': 5e-3, 'warmup_steps': 400, 'beta1': 0.9, 'beta2': 0.999, 'eps': 1e-8},
    },
}

FIG4_FIT_FULL = copy.deepcopy(FIG4_FIT)
FIG4_FIT_FULL['steps'] = 10000
FIG4_FIT_FULL['sampler']['batch'] = 65536

FIG5_SYNTH_EQ9 = {
    'mode': 'synthesize',
    'system': 'eq9',
    'lyapunov': POLARNET_2D,
    'controller': CONTROLLER_2D,
    # 200 rounds of 100 updates
    'steps': 20000,
    'margin': 0.01,
    'sampler': {'half_width': 1.0, 'batch': 32, 'cutoff_radius': 0.1},
    'optimizer': {
        'lyapunov': {'lr': 5e-6},
        'controller': {'lr': 5e-6},
    },
    'warm_start': {'enabled': True, 'steps': 500, 'lr': 5e-3, 'batch': 256},
    'roa': {'grid': 6, 'half_width': 0.8, 'circle_radius': None},
}

FIG6_SYNTH_EQ13 = {
    'mode': 'synthesize',
    'system': 'eq13',
    'lyapunov': POLARNET_2D,
    'controller': CONTROLLER_2D,
    'steps': 20000,
    'margin': 0.01,
    'sampler': {'half_width': 1.0, 'batch': 100, 'cutoff_radius': 0.1},
    'optimizer': {
        'lyapunov': {'lr': 5e-4, 'weight_decay': 1e-5},
        'controller': {'lr': 2e-3, 'weight_decay': 1e-5},
    },
    'warm_start': {'enabled': False},
    'roa': {'circle_radius': 0.7, 'circle_count': 36},
}

PRESETS = {
    'fig4-fit': FIG4_FIT,
    'fig4-fit-full': FIG4_FIT_FULL,
    'fig5-synth-eq9': FIG5_SYNTH_EQ9,
    'fig6-synth-eq13': FIG6_SYNTH_EQ13,
}


def get_preset(name):
    """A deep copy of the named preset; KeyError when unknown."""
    return copy.deepcopy(PRESETS[name])


def deep_merge(base, override):
    """Recursively overlay ``override`` on ``base`` (neither is modified)."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged
