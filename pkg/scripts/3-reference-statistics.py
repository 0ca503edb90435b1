from tt_fusion_workflow.config import ProfileSettings, RunConfig, parse_args, parse_config
from tt_fusion_workflow.data import table_i_counts, table_iii_params
from tt_fusion_workflow.metrics import (delta_report, random_baseline_reference,
                                        table_iv_pair)
from tt_fusion_workflow.tensor_train import TTLayerSpec, tt_param_count


def main():
    """Recompute the joint versus single task statistics of the shipped
    reference F1 values and the random-guessing baselines of the valence
    head, set the reported weight gap between tensor train and late fusion
    against the full-profile TT layer, and write the per-class deltas of
    every fusion kind to `<out>/reference_deltas.csv`.

    This script only needs to be run once.
    """

    (config_path, _) = parse_args()
    config = parse_config(config_path, RunConfig)

    lines = ['fusion,output,class,delta']
    for fusion in ('early', 'late', 'tt'):
        result = delta_report(*table_iv_pair(fusion))
        print(f'{fusion}: mean delta {result.mean_delta:+.3f}, '
              f'p = {result.wilcoxon.p_value:.3f}')
        lines += [f'{fusion},{d.output},{d.label},{d.delta!r}' for d in result.deltas]

    for row in random_baseline_reference(table_i_counts()['valence']):
        print(f'{row["label"]} valence: uniform {row["uniform"]:.3f}, prior matched '
              f'{row["prior_matched"]:.3f}, reported {row["reported"]:.3f}')

    full = ProfileSettings.named('full')
    tt_cost = tt_param_count(TTLayerSpec(input_modes=full.tt_input_modes,
                                         output_modes=full.tt_output_modes,
                                         ranks=full.tt_ranks, has_bias=full.tt_bias))
    for task, row in table_iii_params().items():
        print(f'{task}: reported TT - Late {row["tt"] - row["late"]:,d}, TT layer {tt_cost:,d}')

    config.out.mkdir(parents=True, exist_ok=True)
    (config.out / 'reference_deltas.csv').write_text('\n'.join(lines) + '\n')


if __name__ == '__main__':
    main()
