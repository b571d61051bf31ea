# experiments/targets.py
"""
Closed-form scalar fields used as fitting targets and analytic test functions.

Each field is written once against the diffcore helpers, so it evaluates on
plain arrays and can also be traced (and differentiated) on a tape.
"""

import math

import numpy as np

from networks import diffcore as dc
from networks.nets import FieldNet

BOWL = 'bowl'
EGGCRATE = 'eggcrate'
TWINWELL = 'twinwell'
RING = 'ring'
RIPPLE = 'ripple'
RIPPLE_LINE = 'ripple-line'

TARGET_CHOICES = (BOWL, EGGCRATE, TWINWELL, RING)


def _bowl(x):
    return dc.squared_norm(x)


def _eggcrate(x):
    s1 = dc.sin(math.pi * x[:, 0:1])
    s2 = dc.sin(math.pi * x[:, 1:2])
    return dc.squared_norm(x) + s1 * s1 + s2 * s2


def _twinwell(x):
    x1, x2 = x[:, 0:1], x[:, 1:2]
    right = x1 - 0.5
    left = x1 + 0.5
    return 16.0 * ((right * right + x2 * x2) * (left * left + x2 * x2))


def _ring(x):
    r = dc.squared_norm(x) - 0.25
    return r * r


def _ripple(x):
    # x1^2 + sin^2(pi x1) + x2^2: critical points off the origin along x2 = 0
    s = dc.sin(math.pi * x[:, 0:1])
    return dc.squared_norm(x) + s * s


def _ripple_line(x):
    s = dc.sin(math.pi * x)
    return x * x + s * s


FIELDS = {
    BOWL: (2, _bowl),
    EGGCRATE: (2, _eggcrate),
    TWINWELL: (2, _twinwell),
    RING: (2, _ring),
    RIPPLE: (2, _ripple),
    RIPPLE_LINE: (1, _ripple_line),
}


def target_field(name) -> FieldNet:
    """Look up a field by id; raises KeyError for unknown ids."""
    dim, fn = FIELDS[name]
    return FieldNet(name=name, dim=dim, fn=fn)


def target_value(field, x):
    """
    Field value at one state (float) or at each row of a batch (array).
    """
    if isinstance(field, str):
        field = target_field(field)
    x = np.asarray(x, dtype=np.float64)
    return field(x)
