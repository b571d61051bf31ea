# experiments/expio.py
"""
Checkpoints, configs, reports and CSV exports.

Floats are written with ``repr`` (shortest round-trip form), so every file
is byte-identical for identical inputs and checkpoints reload bit-exactly.
"""

import csv
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable

import numpy as np

from networks.diffcore import ParamVector
from networks.exceptions import DescriptorError, LayoutMismatch
from networks.nets import (BoundNet, FieldNet, PolarNetSpec, architecture_from_descriptor,
                           check_scale_outputs)

from .dynamics import Box, DynSystem, Trajectory
from .exceptions import (CheckpointLayoutError, CheckpointParseError, CheckpointVersionError,
                         ConfigError)
from .targets import FIELDS, target_field, target_value

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

# re-exported for callers that treat targets as data
__all__ = [
    'Checkpoint', 'FORMAT_VERSION', 'FIELDS', 'export_contour_grid', 'export_phase_portrait',
    'export_trajectories', 'load_checkpoint', 'load_config', 'save_checkpoint',
    'save_history_csv', 'save_report_json', 'target_field', 'target_value', 'write_manifest',
]


@dataclass
class Checkpoint:
    """
    Architecture descriptor, parameters and training metadata
    """
    architecture: Dict
    params: ParamVector
    metadata: Dict = field(default_factory=dict)

    @classmethod
    def from_net(cls, arch, params, **metadata):
        return cls(arch.describe(), params, dict(metadata))

    @property
    def arch(self):
        return architecture_from_descriptor(self.architecture)

    @property
    def role(self):
        return self.metadata.get('role', 'lyapunov')

    def bound(self) -> BoundNet:
        return BoundNet(self.arch, self.params)

    def to_dict(self):
        return {
            'format_version': FORMAT_VERSION,
            'architecture': self.architecture,
            'segments': [
                {'name': s.name, 'shape': list(s.shape),
                 'values': [float(v) for v in self.params.values[s.offset:s.stop]]}
                for s in self.params.layout
            ],
            'metadata': self.metadata,
        }


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + '\n'


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(ckpt.to_dict()), encoding='utf-8')
    logger.debug("saved checkpoint %s (%d parameters)", path, len(ckpt.params))
    return path


def _reject_constant(token):
    raise ValueError(f"non-finite number {token}")


def load_checkpoint(path) -> Checkpoint:
    """
    Read a checkpoint; parse, version and layout problems raise distinct errors.
    """
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding='utf-8'), parse_constant=_reject_constant)
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointParseError(f"{path}: not a valid checkpoint document ({exc})") from None
    if not isinstance(document, dict):
        raise CheckpointParseError(f"{path}: checkpoint must be a JSON object")

    version = document.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format_version {version!r} is not supported (expected {FORMAT_VERSION})")

    for key in ('architecture', 'segments'):
        if key not in document:
            raise CheckpointParseError(f"{path}: missing '{key}'")
    try:
        arch = architecture_from_descriptor(document['architecture'])
    except DescriptorError as exc:
        raise CheckpointLayoutError(f"{path}: {exc}") from None

    layout = arch.layout
    segments = document['segments']
    if not isinstance(segments, list):
        raise CheckpointParseError(f"{path}: 'segments' must be a list")
    found = []
    values = []
    for entry in segments:
        try:
            name, shape = entry['name'], tuple(int(s) for s in entry['shape'])
            values.append(np.asarray(entry['values'], dtype=np.float64).reshape(-1))
        except (TypeError, KeyError, ValueError):
            raise CheckpointParseError(f"{path}: malformed segment entry") from None
        found.append((name, shape))
        if values[-1].size != int(np.prod(shape)):
            raise CheckpointLayoutError(f"{path}: segment '{name}' holds {values[-1].size} values, shape {shape}")
    if tuple(found) != layout.entries():
        raise CheckpointLayoutError(
            f"{path}: segments do not match the {document['architecture'].get('kind')} layout "
            f"({len(found)} segments found, {len(layout)} expected)")
    try:
        params = ParamVector(np.concatenate(values) if values else np.zeros(0), layout)
    except LayoutMismatch as exc:
        raise CheckpointLayoutError(f"{path}: {exc}") from None

    if isinstance(arch, PolarNetSpec):
        check_scale_outputs(arch, params)
    return Checkpoint(document['architecture'], params, document.get('metadata') or {})


def load_config(path, preset=None, seed=None):
    """Read a JSON experiment config and validate it."""
    from .forms import build_config

    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise ConfigError('', f"config file {path} does not exist") from None
    except (UnicodeDecodeError, ValueError) as exc:
        raise ConfigError('', f"{path} is not valid JSON ({exc})") from None
    return build_config(data, preset=preset, seed=seed)


# CSV exports

def _fmt(value):
    return repr(float(value))


def _as_scalar_net(V):
    if isinstance(V, str):
        return BoundNet(target_field(V))
    if isinstance(V, FieldNet):
        return BoundNet(V)
    return V


def _open_csv(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.open('w', newline='', encoding='utf-8')


def grid_points(box: Box, res):
    """Inclusive res x res grid, x1 varying slowest."""
    if res < 2:
        raise ValueError("grid resolution must be at least 2")
    x1 = np.linspace(box.low[0], box.high[0], res)
    x2 = np.linspace(box.low[1], box.high[1], res)
    mesh1, mesh2 = np.meshgrid(x1, x2, indexing='ij')
    return np.stack([mesh1.reshape(-1), mesh2.reshape(-1)], axis=1)


def export_contour_grid(V, box: Box, res, path):
    """
    Write x1,x2,v over an inclusive res x res grid; returns the row count.
    """
    points = grid_points(box, res)
    values = _as_scalar_net(V).values(points)
    with _open_csv(path) as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['x1', 'x2', 'v'])
        for (x1, x2), v in zip(points, values):
            writer.writerow([_fmt(x1), _fmt(x2), _fmt(v)])
    return len(points)


def export_trajectories(trajectories: Iterable[Trajectory], path):
    """traj_id,t,x1,x2,...,termination, one row per recorded state."""
    trajectories = list(trajectories)
    dim = trajectories[0].states.shape[1] if trajectories else 2
    rows = 0
    with _open_csv(path) as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['traj_id', 't', *[f"x{i + 1}" for i in range(dim)], 'termination'])
        for traj_id, trajectory in enumerate(trajectories):
            label = trajectory.termination.value
            for t, state in zip(trajectory.times, trajectory.states):
                writer.writerow([traj_id, _fmt(t), *[_fmt(s) for s in state], label])
                rows += 1
    return rows


def export_phase_portrait(system: DynSystem, controller, box: Box, res, path):
    """x1,x2,dx1,dx2 of the closed loop over an inclusive grid."""
    points = grid_points(box, res)
    rates = system.phase_field(controller, points)
    with _open_csv(path) as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['x1', 'x2', 'dx1', 'dx2'])
        for (x1, x2), (d1, d2) in zip(points, rates):
            writer.writerow([_fmt(x1), _fmt(x2), _fmt(d1), _fmt(d2)])
    return len(points)


def save_history_csv(history, path):
    with _open_csv(path) as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['step', 'loss'])
        for step, loss in enumerate(history.losses, start=1):
            writer.writerow([step, _fmt(loss)])
    return len(history.losses)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if np.isfinite(value) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_json(report) -> str:
    return _dump(_jsonable(report))


def save_report_json(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_json(report), encoding='utf-8')
    return path


def package_versions():
    import django
    import scipy

    from lyapforge import __version__

    return {
        'lyapforge': __version__,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'django': django.get_version(),
    }


def write_manifest(out_dir, command, config_hash, seed, outputs, extra=None):
    """
    manifest.json next to the outputs. Holds no timestamps, so identical
    invocations produce identical manifests.
    """
    manifest = {
        'command': command,
        'config_hash': config_hash,
        'seed': seed,
        'versions': package_versions(),
        'outputs': sorted(str(name) for name in outputs),
    }
    if extra:
        manifest.update(extra)
    save_report_json(manifest, Path(out_dir) / 'manifest.json')
    return manifest
