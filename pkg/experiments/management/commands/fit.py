# experiments/management/commands/fit.py

from experiments.expio import (Checkpoint, export_contour_grid, save_checkpoint, save_history_csv,
                               save_report_json)
from experiments.train import FIT, evaluate_mse, fit_function
from experiments.targets import target_field
from networks.nets import BoundNet, architecture_from_descriptor

from ._base import ExperimentCommand

CONTOUR_GRID = 101


class Command(ExperimentCommand):
    help = 'Fit a Lyapunov network to a closed-form target field'
    command_name = 'fit'

    def run(self, options, out_dir):
        cfg = self.load_experiment(options, FIT)
        config_hash = cfg.config_hash()
        arch = architecture_from_descriptor(cfg.lyapunov)
        self.stderr.write(f"Fitting {cfg.lyapunov['kind']} to '{cfg.target}' ({cfg.steps} steps)...")

        params, history = fit_function(cfg)

        box = cfg.sampler.box(arch.input_dim)
        mse = evaluate_mse(arch, params, target_field(cfg.target), box,
                           samples=cfg.eval_samples, seed=cfg.seed)
        save_checkpoint(out_dir / 'lyapunov.json', Checkpoint.from_net(
            arch, params,
            role='lyapunov', target=cfg.target, seed=cfg.seed, steps=cfg.steps,
            config_hash=config_hash, box_half_width=cfg.sampler.half_width,
        ))
        save_history_csv(history, out_dir / 'history.csv')
        export_contour_grid(BoundNet(arch, params), box, self.grid(options, CONTOUR_GRID, minimum=2),
                            out_dir / 'contour.csv')
        save_report_json({
            'target': cfg.target,
            'steps': cfg.steps,
            'final_loss': history.losses[-1] if history.losses else None,
            'held_out_mse': mse,
            'eval_samples': cfg.eval_samples,
            'snapshots': history.snapshots,
        }, out_dir / 'fit.json')
        self.stderr.write(f"held-out MSE {mse:.6e}")

        return {
            'outputs': ['lyapunov.json', 'history.csv', 'contour.csv', 'fit.json'],
            'config_hash': config_hash,
            'seed': cfg.seed,
            'extra': {'config': cfg.to_dict()},
        }
