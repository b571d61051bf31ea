# experiments/management/commands/verify.py

from experiments.dynamics import Box
from experiments.expio import Checkpoint, report_json, save_report_json
from experiments.targets import FIELDS, target_field
from experiments.verify import (DEFAULT_GRID, ORIGIN_RADIUS, check_positive_definite,
                                check_vdot_negative, find_critical_points)
from networks.diffcore import ParamVector

from ._base import ExperimentCommand, UsageError, positive_int

DEFAULT_HALF_WIDTH = 1.0


class Command(ExperimentCommand):
    help = 'Check a Lyapunov checkpoint: critical points, positive definiteness, optionally dV/dt < 0'
    command_name = 'verify'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--target', choices=sorted(FIELDS),
                            help='Verify a closed-form field instead of a checkpoint')
        parser.add_argument('--system', help='System for the dV/dt scan (default: from the controller)')
        parser.add_argument('--half-width', type=float, help='Half-width of the verification box')
        parser.add_argument('--samples', type=positive_int, default=10000,
                            help='Samples for the positive-definiteness check')
        parser.add_argument('--margin', type=float, default=0.0)

    def lyapunov_and_controller(self, options):
        if options['target']:
            field = target_field(options['target'])
            V = Checkpoint.from_net(field, ParamVector.zeros(field.layout), role='lyapunov',
                                   target=options['target'])
            extra = self.checkpoints(options, minimum=0, maximum=1)
            return V, (extra[0] if extra else None)
        ckpts = self.checkpoints(options, minimum=1, maximum=2)
        roles = {ckpt.role: ckpt for ckpt in ckpts}
        if 'lyapunov' not in roles or len(roles) != len(ckpts):
            raise UsageError("verify takes one Lyapunov checkpoint and at most one controller checkpoint")
        return roles['lyapunov'], roles.get('controller')

    def run(self, options, out_dir):
        V_ckpt, u_ckpt = self.lyapunov_and_controller(options)
        if u_ckpt is not None and u_ckpt.role != 'controller':
            raise UsageError("the second checkpoint must hold a controller")
        V = V_ckpt.bound()
        half_width = options['half_width'] or V_ckpt.metadata.get('box_half_width', DEFAULT_HALF_WIDTH)
        if half_width <= 0:
            raise UsageError("--half-width must be positive")
        box = Box.symmetric(half_width, V.input_dim)
        grid = self.grid(options, DEFAULT_GRID)

        critical = find_critical_points(V, box, grid_res=grid)
        positive = check_positive_definite(V, box, samples=options['samples'],
                                           seed=options['seed'] or 0)
        report = {
            'box': box.to_dict(),
            'critical_points': critical.to_dict(),
            'single_pole': critical.single_pole(),
            'origin_radius': ORIGIN_RADIUS,
            'positive_definite': positive.to_dict(),
        }
        if u_ckpt is not None:
            system = self.system_for(options['system'], u_ckpt, V_ckpt)
            if system.state_dim != V.input_dim:
                raise UsageError(f"system '{system.name}' does not match the Lyapunov checkpoint")
            scan = check_vdot_negative(V, system, u_ckpt.bound(), box, grid_res=grid,
                                       margin=options['margin'])
            report['system'] = system.name
            report['vdot'] = scan.to_dict()

        passed = critical.single_pole() and positive.ok
        report['verdict'] = 'pass' if passed else 'negative'
        self.stdout.write(report_json(report), ending='')
        save_report_json(report, out_dir / 'verify.json')

        result = {
            'outputs': ['verify.json'],
            'config_hash': V_ckpt.metadata.get('config_hash'),
            'seed': V_ckpt.metadata.get('seed'),
            'extra': {'verdict': report['verdict']},
        }
        if not passed:
            result['negative'] = (
                f"verification negative: {critical.count} critical point(s), "
                f"min V {positive.min_value:.3e}")
        return result
