from tt_fusion_workflow.config import RunConfig, parse_args, parse_config
from tt_fusion_workflow.data import (Marginals, label_counts, load_marginals,
                                     synth_generate, write_dataset)


def main():
    """Synthesize the labelled clip dataset the training runs read.

    The dataset is written next to the manifest named in the configuration
    (`data.manifest`), or to `<out>/dataset` when no manifest is configured.

    This script only needs to be run once per configuration.
    """

    (config_path, _) = parse_args()
    config = parse_config(config_path, RunConfig)

    if config.data.manifest is not None:
        dataset_dir = config.data.manifest.parent
    else:
        dataset_dir = config.out / 'dataset'

    if config.data.marginals is not None:
        marginals = load_marginals(config.data.marginals)
    else:
        marginals = Marginals.table_i(include_misc=config.data.include_misc)

    records = synth_generate(config.seed, config.data.n_clips, config.model.profile, marginals)
    print(f'Generated {len(records)} clips.')

    for head in ('valence', 'arousal', 'context'):
        print(f'{head} counts: {label_counts(records, head).tolist()}')

    write_dataset(records, dataset_dir)
    print(f'Wrote dataset to {dataset_dir}.')


if __name__ == '__main__':
    main()
