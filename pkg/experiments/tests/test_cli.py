# experiments/tests/test_cli.py

import json
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from io import StringIO
from pathlib import Path
from unittest import mock

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase

from experiments.cli import run
from experiments.expio import Checkpoint, save_checkpoint
from experiments.models import ExperimentRun
from networks.nets import PolarNetSpec, init_params

TINY_FIT = {
    'mode': 'fit',
    'target': 'bowl',
    'lyapunov': {'kind': 'polarnet', 'dim': 2, 'hidden': [4, 4]},
    'steps': 3,
    'log_every': 0,
    'eval_samples': 100,
    'sampler': {'batch': 16},
}

TINY_SYNTH = {
    'mode': 'synthesize',
    'system': 'eq9',
    'lyapunov': {'kind': 'polarnet', 'dim': 2, 'hidden': [4, 4]},
    'controller': {'kind': 'mlp', 'layer_widths': [2, 8, 2], 'has_bias': False},
    'steps': 2,
    'margin': 0.01,
    'log_every': 0,
    'sampler': {'batch': 8, 'cutoff_radius': 0.1},
    'roa': {'grid': 2, 't_max': 1.0},
}


class CliTestCase(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def cli(self, *argv):
        """Run the front end; returns (exit code, stdout, stderr)."""
        out, err = StringIO(), StringIO()
        with redirect_stdout(out), redirect_stderr(err):
            code = run([str(a) for a in argv])
        return code, out.getvalue(), err.getvalue()

    def write_config(self, name, data):
        path = self.dir / name
        path.write_text(json.dumps(data), encoding='utf-8')
        return path

    def fresh_checkpoint(self):
        spec = PolarNetSpec(dim=2)
        return save_checkpoint(self.dir / 'fresh.json',
                               Checkpoint.from_net(spec, init_params(spec, 0), role='lyapunov'))


class UsageTests(CliTestCase):

    def test_missing_subcommand(self):
        code, _, err = self.cli()
        self.assertEqual(code, 2)
        self.assertIn('usage: lyapforge', err)

    def test_unknown_subcommand(self):
        self.assertEqual(self.cli('train')[0], 2)

    def test_help(self):
        code, out, _ = self.cli('--help')
        self.assertEqual(code, 0)
        self.assertIn('fit,synth,simulate,verify,export', out)

    def test_unknown_flag(self):
        self.assertEqual(self.cli('fit', '--epochs', '3')[0], 2)

    def test_fit_without_config(self):
        code, _, err = self.cli('fit', '--out', self.dir)
        self.assertEqual(code, 2)
        self.assertIn('needs --config or --preset', err)

    def test_invalid_config_value(self):
        config = self.write_config('bad.json', dict(TINY_FIT, sampler={'batch': 0}))
        code, _, err = self.cli('fit', '--config', config, '--out', self.dir)
        self.assertEqual(code, 2)
        self.assertIn('sampler.batch', err)

    def test_missing_checkpoint_file(self):
        code, _, _ = self.cli('verify', '--checkpoint', self.dir / 'absent.json', '--out', self.dir)
        self.assertEqual(code, 2)

    def test_corrupt_checkpoint_is_runtime_failure(self):
        path = self.dir / 'corrupt.json'
        path.write_text('{"format_version": 1', encoding='utf-8')
        code, _, _ = self.cli('verify', '--checkpoint', path, '--out', self.dir, '--quiet')
        self.assertEqual(code, 1)


class UnexpectedFailureTests(CliTestCase):

    def test_os_error_marks_run_failed(self):
        blocker = self.dir / 'not-a-directory'
        blocker.write_text('', encoding='utf-8')
        code, _, err = self.cli('export', '--target', 'ring', '--grid', 4, '--out', blocker, '--quiet')
        self.assertEqual(code, 1)
        self.assertIn('FileExistsError', err)
        run_row = ExperimentRun.objects.get()
        self.assertEqual((run_row.status, run_row.exit_code), ('failed', 1))
        self.assertTrue(run_row.is_finished)

    def test_manifest_failure_marks_run_failed(self):
        with mock.patch('experiments.management.commands._base.write_manifest',
                        side_effect=OSError('disk full')):
            code, _, err = self.cli('export', '--target', 'ring', '--grid', 4, '--out', self.dir, '--quiet')
        self.assertEqual(code, 1)
        self.assertIn('disk full', err)
        run_row = ExperimentRun.objects.get()
        self.assertEqual((run_row.status, run_row.exit_code), ('failed', 1))


class VerifyCommandTests(CliTestCase):

    def test_fresh_polarnet_passes(self):
        code, out, _ = self.cli('verify', '--checkpoint', self.fresh_checkpoint(), '--out', self.dir,
                                '--grid', 15, '--samples', 500, '--quiet')
        self.assertEqual(code, 0)
        report = json.loads(out)
        self.assertEqual(report['verdict'], 'pass')
        self.assertEqual(report['critical_points']['count'], 1)
        self.assertTrue((self.dir / 'verify.json').exists())
        self.assertTrue((self.dir / 'manifest.json').exists())

    def test_eggcrate_is_negative(self):
        code, out, _ = self.cli('verify', '--target', 'eggcrate', '--out', self.dir, '--grid', 15,
                                '--samples', 200, '--quiet')
        self.assertEqual(code, 3)
        report = json.loads(out)
        self.assertEqual(report['verdict'], 'negative')
        self.assertGreater(report['critical_points']['count'], 1)

    def test_registry_records_outcome(self):
        self.cli('verify', '--target', 'eggcrate', '--out', self.dir, '--grid', 15, '--samples', 200,
                 '--quiet')
        self.cli('verify', '--target', 'bowl', '--out', self.dir, '--grid', 8, '--samples', 200, '--quiet')
        negative = ExperimentRun.objects.get(status='negative')
        self.assertEqual(negative.command, 'verify')
        self.assertEqual(negative.exit_code, 3)
        self.assertEqual(negative.manifest['verdict'], 'negative')
        passed = ExperimentRun.objects.get(status='succeeded')
        self.assertEqual(passed.exit_code, 0)
        self.assertTrue(passed.is_finished)


class FitCommandTests(CliTestCase):

    def test_outputs_are_reproducible(self):
        config = self.write_config('fit.json', TINY_FIT)
        first, second = self.dir / 'first', self.dir / 'second'
        for out_dir in (first, second):
            code, _, _ = self.cli('fit', '--config', config, '--out', out_dir, '--grid', 5, '--quiet')
            self.assertEqual(code, 0)
        for name in ('lyapunov.json', 'history.csv', 'contour.csv', 'fit.json', 'manifest.json'):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), msg=name)
        self.assertEqual(len((first / 'contour.csv').read_text(encoding='utf-8').splitlines()), 26)

    def test_registry_row(self):
        config = self.write_config('fit.json', TINY_FIT)
        self.cli('fit', '--config', config, '--out', self.dir, '--grid', 5, '--seed', 4, '--quiet')
        run_row = ExperimentRun.objects.get()
        self.assertEqual(run_row.command, 'fit')
        self.assertEqual(run_row.status, 'succeeded')
        self.assertEqual(run_row.seed, 4)
        self.assertEqual(len(run_row.config_hash), 64)
        self.assertEqual(run_row.manifest['config']['seed'], 4)

    def test_failed_run_is_recorded(self):
        self.cli('fit', '--out', self.dir)
        run_row = ExperimentRun.objects.get()
        self.assertEqual(run_row.status, 'failed')
        self.assertEqual(run_row.exit_code, 2)

    def test_wrong_mode(self):
        config = self.write_config('synth.json', TINY_SYNTH)
        code, _, err = self.cli('fit', '--config', config, '--out', self.dir)
        self.assertEqual(code, 2)
        self.assertIn("expects a 'fit' config", err)


class SynthesisPipelineTests(CliTestCase):

    def test_synth_simulate_export(self):
        config = self.write_config('synth.json', TINY_SYNTH)
        synth_dir = self.dir / 'synth'
        code, _, _ = self.cli('synth', '--config', config, '--out', synth_dir, '--grid', 8, '--quiet')
        self.assertEqual(code, 0)
        for name in ('lyapunov.json', 'controller.json', 'history.csv', 'roa.json', 'trajectories.csv',
                     'phase.csv', 'manifest.json'):
            self.assertTrue((synth_dir / name).exists(), msg=name)
        roa = json.loads((synth_dir / 'roa.json').read_text(encoding='utf-8'))
        self.assertEqual(roa['roa']['counts']['converged'] + roa['roa']['counts']['escaped']
                         + roa['roa']['counts']['timed-out'], 4)

        sim_dir = self.dir / 'simulate'
        code, _, _ = self.cli('simulate', '--checkpoint', synth_dir / 'controller.json', '--x0', '0.1,0.1',
                              '--x0=-0.2,0.05', '--t-max', 0.2, '--out', sim_dir, '--quiet')
        self.assertEqual(code, 0)
        lines = (sim_dir / 'trajectories.csv').read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], 'traj_id,t,x1,x2,termination')
        self.assertTrue(lines[1].startswith('0,0.0,0.1,0.1,'))

        export_dir = self.dir / 'export'
        code, _, _ = self.cli('export', '--checkpoint', synth_dir / 'lyapunov.json',
                              '--checkpoint', synth_dir / 'controller.json', '--grid', 6,
                              '--out', export_dir, '--quiet')
        self.assertEqual(code, 0)
        self.assertEqual(len((export_dir / 'contour.csv').read_text(encoding='utf-8').splitlines()), 37)
        self.assertEqual(len((export_dir / 'phase.csv').read_text(encoding='utf-8').splitlines()), 37)

        code, out, _ = self.cli('verify', '--checkpoint', synth_dir / 'lyapunov.json',
                                '--checkpoint', synth_dir / 'controller.json', '--grid', 8,
                                '--samples', 200, '--out', self.dir / 'verify', '--quiet')
        self.assertIn(code, (0, 3))
        report = json.loads(out)
        self.assertEqual(report['system'], 'eq9')
        self.assertIn('violation_fraction', report['vdot'])

    def test_simulate_needs_controller(self):
        code, _, err = self.cli('simulate', '--checkpoint', self.fresh_checkpoint(), '--system', 'eq9',
                                '--out', self.dir)
        self.assertEqual(code, 2)
        self.assertIn('controller checkpoint', err)


class ManagementCommandTests(CliTestCase):

    def test_call_command_raises_with_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('verify', target='twinwell', out=str(self.dir), grid=15, samples=200, quiet=True,
                         stdout=StringIO(), stderr=StringIO())
        self.assertEqual(ctx.exception.returncode, 3)

    def test_export_target(self):
        call_command('export', target='ring', out=str(self.dir), grid=4, quiet=True,
                     stdout=StringIO(), stderr=StringIO())
        lines = (self.dir / 'contour.csv').read_text(encoding='utf-8').splitlines()
        self.assertEqual(lines[0], 'x1,x2,v')
        self.assertEqual(len(lines), 17)
