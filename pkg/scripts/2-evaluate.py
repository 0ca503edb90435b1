from tt_fusion_workflow.config import RunConfig, parse_args, parse_config
from tt_fusion_workflow.metrics import report_render
from tt_fusion_workflow.training import evaluate_run


def main():
    """Score the checkpoint of every training run under `<out>` on its test
    split and collect the F1 values in one table.

    This script only needs to be run once, after all training runs finished.
    """

    (config_path, _) = parse_args()
    config = parse_config(config_path, RunConfig)

    run_dirs = sorted(config.out.glob('run_*'))
    print(f'Found {len(run_dirs)} runs.')

    reports = [evaluate_run(run_dir) for run_dir in run_dirs]
    table, text = report_render(reports)
    print(text, end='')

    (config.out / 'report.csv').write_text(table)


if __name__ == '__main__':
    main()
