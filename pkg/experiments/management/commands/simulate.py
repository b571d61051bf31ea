# experiments/management/commands/simulate.py

import numpy as np

from experiments.dynamics import DEFAULT_CONV_TOL, DEFAULT_DT, DEFAULT_T_MAX, Box
from experiments.expio import export_trajectories, save_report_json
from experiments.verify import circle_initial_states, grid_initial_states, roa_estimate

from ._base import ExperimentCommand, UsageError, positive_int, state_vector

DEFAULT_GRID = 6
DEFAULT_HALF_WIDTH = 0.8


class Command(ExperimentCommand):
    help = 'Roll out a checkpointed controller from given, gridded or circular initial states'
    command_name = 'simulate'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--system', help='System name (default: taken from the checkpoint)')
        parser.add_argument('--x0', action='append', type=state_vector, default=[],
                            help='Initial state as comma-separated values (repeatable)')
        parser.add_argument('--circle', type=float, help='Sample initial states on a circle of this radius')
        parser.add_argument('--count', type=positive_int, default=36, help='Points on the circle')
        parser.add_argument('--half-width', type=float, default=DEFAULT_HALF_WIDTH,
                            help='Half-width of the initial-state grid')
        parser.add_argument('--dt', type=float, default=DEFAULT_DT)
        parser.add_argument('--t-max', type=float, default=DEFAULT_T_MAX)
        parser.add_argument('--conv-tol', type=float, default=DEFAULT_CONV_TOL)

    def initial_states(self, options, state_dim):
        if options['x0'] and options['circle']:
            raise UsageError("use either --x0 or --circle, not both")
        if options['x0']:
            states = np.vstack(options['x0'])
            if states.shape[1] != state_dim:
                raise UsageError(f"--x0 needs {state_dim} comma-separated values")
            return states
        if options['circle']:
            if state_dim != 2 or options['circle'] <= 0:
                raise UsageError("--circle needs a planar system and a positive radius")
            return circle_initial_states(options['circle'], options['count'])
        if options['half_width'] <= 0:
            raise UsageError("--half-width must be positive")
        return grid_initial_states(Box.symmetric(options['half_width'], state_dim),
                                   options['grid'] or DEFAULT_GRID)

    def run(self, options, out_dir):
        (ckpt,) = self.checkpoints(options, minimum=1, maximum=1)
        if ckpt.role != 'controller':
            raise UsageError("simulate needs a controller checkpoint")
        system = self.system_for(options['system'], ckpt)
        controller = ckpt.bound()
        if controller.input_dim != system.state_dim or controller.output_dim != system.input_dim:
            raise UsageError(f"the controller does not fit system '{system.name}'")
        if options['dt'] <= 0 or options['t_max'] <= 0:
            raise UsageError("--dt and --t-max must be positive")

        states = self.initial_states(options, system.state_dim)
        self.stderr.write(f"Simulating {len(states)} trajectories of '{system.name}'...")
        estimate = roa_estimate(system, controller, initial_states=states, dt=options['dt'],
                                t_max=options['t_max'], conv_tol=options['conv_tol'])
        export_trajectories(estimate.trajectories, out_dir / 'trajectories.csv')
        save_report_json({'system': system.name, 'roa': estimate.to_dict()}, out_dir / 'roa.json')
        self.stderr.write(f"{estimate.counts['converged']}/{estimate.total} converged")
        return {
            'outputs': ['trajectories.csv', 'roa.json'],
            'config_hash': ckpt.metadata.get('config_hash'),
            'seed': ckpt.metadata.get('seed'),
            'extra': {'system': system.name, 'dt': options['dt'], 't_max': options['t_max']},
        }
