# experiments/management/commands/_base.py
"""
Shared plumbing for the workbench subcommands: common flags, config
loading, the run registry and the mapping of errors to exit codes.
"""

import logging
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from experiments.dynamics import get_system
from experiments.exceptions import ConfigError
from experiments.expio import load_checkpoint, load_config, write_manifest
from experiments.forms import config_from_preset
from experiments.models import ExperimentRun
from networks.exceptions import LyapforgeError

logger = logging.getLogger('lyapforge')

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NEGATIVE = 3

WORKBENCH_LOGGERS = ('lyapforge', 'networks', 'experiments')


class UsageError(CommandError):

    def __init__(self, message):
        super().__init__(message, returncode=EXIT_USAGE)


class VerificationNegative(CommandError):

    def __init__(self, message):
        super().__init__(message, returncode=EXIT_NEGATIVE)


def positive_int(text):
    value = int(text)
    if value < 1:
        raise ValueError(text)
    return value


def state_vector(text):
    """'0.3,-0.2' -> array([0.3, -0.2])"""
    return np.array([float(part) for part in text.split(',')], dtype=np.float64)


class ExperimentCommand(BaseCommand):
    """
    Base class of fit, synth, simulate, verify and export.

    Subclasses implement ``run(options, out_dir)`` and return a dict with
    ``outputs`` (file names written to ``out_dir``) and optionally
    ``config_hash``, ``seed``, ``extra`` (merged into the manifest) and
    ``negative`` (a message; the command then exits with code 3).
    """
    requires_system_checks = []
    command_name = None

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON experiment config')
        parser.add_argument('--checkpoint', action='append', default=[],
                            help='Checkpoint file (repeatable)')
        parser.add_argument('--out', help='Output directory (default: LYAPFORGE_OUTPUT_DIR)')
        parser.add_argument('--seed', type=int, help='Override the config seed')
        parser.add_argument('--grid', type=positive_int, help='Grid resolution')
        parser.add_argument('--preset', help='Named preset')
        parser.add_argument('--quiet', action='store_true', help='Only log warnings and errors')

    def handle(self, *args, **options):
        out_dir = Path(options['out'] or settings.LYAPFORGE_OUTPUT_DIR)
        levels = self._quiet(options['quiet'])
        run = ExperimentRun.start(self.command_name, out_dir, preset=options.get('preset'),
                                  seed=options.get('seed'))
        try:
            result = self.run(options, out_dir)
            manifest = write_manifest(
                out_dir, self.command_name, result.get('config_hash'), result.get('seed'),
                result['outputs'], extra=result.get('extra'))
        except CommandError as exc:
            self._finish(run, 'failed', exc.returncode)
            raise
        except ConfigError as exc:
            self._finish(run, 'failed', EXIT_USAGE)
            raise UsageError(str(exc)) from exc
        except LyapforgeError as exc:
            logger.error("%s failed: %s", self.command_name, exc)
            self._finish(run, 'failed', EXIT_FAILURE)
            raise CommandError(str(exc), returncode=EXIT_FAILURE) from exc
        except Exception as exc:
            logger.exception("%s crashed", self.command_name)
            self._finish(run, 'failed', EXIT_FAILURE)
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=EXIT_FAILURE) from exc
        finally:
            self._restore(levels)

        if result.get('negative'):
            self._finish(run, 'negative', EXIT_NEGATIVE, manifest)
            raise VerificationNegative(result['negative'])
        self._finish(run, 'succeeded', 0, manifest)
        self.stderr.write(self.style.SUCCESS(
            f"{self.command_name}: wrote {len(result['outputs'])} file(s) to {out_dir}"))

    def run(self, options, out_dir):
        raise NotImplementedError('subclasses of ExperimentCommand must provide a run() method')

    # helpers

    def load_experiment(self, options, mode):
        if options['config']:
            cfg = load_config(options['config'], preset=options['preset'], seed=options['seed'])
        elif options['preset']:
            cfg = config_from_preset(options['preset'], seed=options['seed'])
        else:
            raise UsageError(f"{self.command_name} needs --config or --preset")
        if cfg.mode != mode:
            raise UsageError(f"{self.command_name} expects a '{mode}' config, got '{cfg.mode}'")
        return cfg

    def checkpoints(self, options, minimum=1, maximum=2):
        paths = options['checkpoint']
        if not minimum <= len(paths) <= maximum:
            wanted = minimum if minimum == maximum else f"{minimum} to {maximum}"
            raise UsageError(f"{self.command_name} takes {wanted} --checkpoint file(s)")
        for path in paths:
            if not Path(path).exists():
                raise UsageError(f"checkpoint {path} does not exist")
        return [load_checkpoint(path) for path in paths]

    def grid(self, options, default, minimum=8):
        res = options['grid'] or default
        if res < minimum:
            raise UsageError(f"--grid must be at least {minimum}")
        return res

    def system_for(self, name, *checkpoints):
        for ckpt in checkpoints:
            name = name or ckpt.metadata.get('system')
        if not name:
            raise UsageError(f"{self.command_name} needs --system or a checkpoint naming one")
        try:
            return get_system(name)
        except LyapforgeError as exc:
            raise UsageError(str(exc)) from exc

    def _finish(self, run, status, exit_code, manifest=None):
        if run is not None:
            run.finish(status, exit_code, manifest=manifest,
                       config_hash=(manifest or {}).get('config_hash'))

    def _quiet(self, quiet):
        if not quiet:
            return None
        levels = {}
        for name in WORKBENCH_LOGGERS:
            target = logging.getLogger(name)
            levels[name] = target.level
            target.setLevel(logging.WARNING)
        return levels

    def _restore(self, levels):
        for name, level in (levels or {}).items():
            logging.getLogger(name).setLevel(level)
