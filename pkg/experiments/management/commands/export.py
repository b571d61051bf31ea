# experiments/management/commands/export.py

from experiments.dynamics import Box
from experiments.expio import export_contour_grid, export_phase_portrait
from experiments.targets import FIELDS, target_field

from ._base import ExperimentCommand, UsageError

CONTOUR_GRID = 101
PHASE_GRID = 21


class Command(ExperimentCommand):
    help = 'Regenerate contour and phase-portrait CSVs from checkpoints'
    command_name = 'export'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--target', choices=sorted(FIELDS), help='Export a closed-form field')
        parser.add_argument('--system', help='System for the phase portrait (default: from the controller)')
        parser.add_argument('--half-width', type=float, help='Half-width of the exported box')

    def run(self, options, out_dir):
        ckpts = self.checkpoints(options, minimum=0, maximum=2)
        roles = {ckpt.role: ckpt for ckpt in ckpts}
        if len(roles) != len(ckpts):
            raise UsageError("export takes at most one checkpoint per role")
        if not ckpts and not options['target']:
            raise UsageError("export needs --checkpoint or --target")
        if options['target'] and 'lyapunov' in roles:
            raise UsageError("use either --target or a Lyapunov checkpoint, not both")

        V_ckpt, u_ckpt = roles.get('lyapunov'), roles.get('controller')
        metadata = (V_ckpt or u_ckpt).metadata if ckpts else {}
        half_width = options['half_width'] or metadata.get('box_half_width', 1.0)
        if half_width <= 0:
            raise UsageError("--half-width must be positive")
        outputs = []

        V = target_field(options['target']) if options['target'] else (V_ckpt and V_ckpt.bound())
        if V is not None:
            if V.input_dim != 2:
                raise UsageError("contour exports need a planar field")
            export_contour_grid(V, Box.symmetric(half_width, 2), self.grid(options, CONTOUR_GRID, minimum=2),
                                out_dir / 'contour.csv')
            outputs.append('contour.csv')

        if u_ckpt is not None:
            system = self.system_for(options['system'], u_ckpt)
            if system.state_dim != 2:
                raise UsageError("phase portraits need a planar system")
            export_phase_portrait(system, u_ckpt.bound(), Box.symmetric(half_width, 2),
                                  self.grid(options, PHASE_GRID, minimum=2), out_dir / 'phase.csv')
            outputs.append('phase.csv')

        return {
            'outputs': outputs,
            'config_hash': metadata.get('config_hash'),
            'seed': metadata.get('seed'),
        }
