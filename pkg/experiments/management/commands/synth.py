# experiments/management/commands/synth.py

from experiments.dynamics import get_system
from experiments.expio import (Checkpoint, export_phase_portrait, export_trajectories,
                               save_checkpoint, save_history_csv, save_report_json)
from experiments.train import SYNTHESIZE, build_controller, synthesize_controller
from experiments.verify import check_vdot_negative, roa_estimate, roa_initial_states
from networks.nets import BoundNet, architecture_from_descriptor

from ._base import ExperimentCommand

PHASE_GRID = 21
VDOT_GRID = 41


class Command(ExperimentCommand):
    help = 'Jointly train a controller and its Lyapunov network for a control-affine system'
    command_name = 'synth'

    def run(self, options, out_dir):
        cfg = self.load_experiment(options, SYNTHESIZE)
        config_hash = cfg.config_hash()
        system = get_system(cfg.system)
        V_arch = architecture_from_descriptor(cfg.lyapunov)
        u_arch = build_controller(cfg, system)
        self.stderr.write(f"Synthesizing a controller for '{system.name}' ({cfg.steps} steps)...")

        u_params, V_params, history = synthesize_controller(cfg)

        metadata = {'system': system.name, 'seed': cfg.seed, 'steps': cfg.steps,
                    'config_hash': config_hash, 'box_half_width': cfg.sampler.half_width}
        save_checkpoint(out_dir / 'lyapunov.json',
                        Checkpoint.from_net(V_arch, V_params, role='lyapunov', **metadata))
        save_checkpoint(out_dir / 'controller.json',
                        Checkpoint.from_net(u_arch, u_params, role='controller', **metadata))
        save_history_csv(history, out_dir / 'history.csv')

        V = BoundNet(V_arch, V_params)
        controller = BoundNet(u_arch, u_params)
        box = cfg.sampler.box(system.state_dim)
        estimate = roa_estimate(system, controller,
                                initial_states=roa_initial_states(cfg.roa, system.state_dim),
                                dt=cfg.roa.dt, t_max=cfg.roa.t_max, conv_tol=cfg.roa.conv_tol)
        scan = check_vdot_negative(V, system, controller, box, grid_res=self.grid(options, VDOT_GRID))
        save_report_json({
            'system': system.name,
            'roa': estimate.to_dict(),
            'vdot': scan.to_dict(),
            'final_risk': history.losses[-1] if history.losses else None,
            'snapshots': history.snapshots,
        }, out_dir / 'roa.json')
        export_trajectories(estimate.trajectories, out_dir / 'trajectories.csv')
        outputs = ['lyapunov.json', 'controller.json', 'history.csv', 'roa.json', 'trajectories.csv']
        if system.state_dim == 2:
            export_phase_portrait(system, controller, box, PHASE_GRID, out_dir / 'phase.csv')
            outputs.append('phase.csv')

        self.stderr.write(
            f"region of attraction {estimate.counts['converged']}/{estimate.total} converged, "
            f"dV/dt violations {scan.violation_fraction:.4f}")
        return {
            'outputs': outputs,
            'config_hash': config_hash,
            'seed': cfg.seed,
            'extra': {'config': cfg.to_dict()},
        }
