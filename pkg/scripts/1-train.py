from tt_fusion_workflow.config import RunConfig, parse_args, parse_config
from tt_fusion_workflow.training import run_training


def main():
    """Train one model and write its run directory (configuration snapshot,
    per-epoch metrics, test report and checkpoint).

    This script can be run multiple times in parallel for independent
    training runs. Provide the `--index` command-line argument when running in
    parallel; the index is added to the seed and selects the run directory
    `<out>/run_<index>`.
    """

    (config_path, index) = parse_args()
    config = parse_config(config_path, RunConfig)
    config = config.model_copy(update={'seed': config.seed + index,
                                       'out': config.out / f'run_{index:03d}'})

    artifacts = run_training(config)

    for m in artifacts.report.classes:
        print(f'{m.output:8s} {m.label:18s} F1 {m.f1:.3f}')


if __name__ == '__main__':
    main()
