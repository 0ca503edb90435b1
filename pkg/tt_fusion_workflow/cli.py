"""Command-line front end: ``ttfuse {generate,train,eval,compare,params,gradcheck}``."""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import FusionKind, ModelSpec, RunConfig, TaskSet, parse_config
from .data import (Marginals, head_classes, label_counts, load_marginals, synth_generate,
                   write_dataset)
from .exceptions import ConfigError, FormatError, FusionError
from .gradcheck import run_gradcheck_suite
from .metrics import (PairedDeltaReport, delta_report, merge_reports, report_render,
                      table_iv_pair)
from .models import build_model, count_params
from .tensor_train import TTLayerSpec, compression_report
from .training import evaluate_run, run_training

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with the config error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f'{self.prog}: error: {message}\n')


def build_parser() -> argparse.ArgumentParser:
    """Parser of the `ttfuse` subcommands; every subcommand shares the run
    configuration overrides."""

    common = _Parser(add_help=False)
    common.add_argument('--config', type=Path, help='path to a YAML or JSON run config')
    common.add_argument('--fusion', choices=[k.value for k in FusionKind])
    common.add_argument('--task', choices=[t.value for t in TaskSet])
    common.add_argument('--profile', choices=['full', 'desk'])
    common.add_argument('--seed', type=int)
    common.add_argument('--epochs', type=int)
    common.add_argument('--lr', type=float)
    common.add_argument('--out', type=Path, help='output directory')
    common.add_argument('-v', '--verbose', action='store_true', help='debug logging')

    parser = _Parser(prog='ttfuse', description='Tensor-Train multimodal fusion experiments')
    commands = parser.add_subparsers(dest='command', required=True)

    generate = commands.add_parser('generate', parents=[common],
                                   help='synthesize a labelled clip dataset')
    generate.add_argument('--n', type=int, help='number of clips')
    generate.add_argument('--marginals', type=Path, help='JSON label marginals')
    generate.add_argument('--include-misc', action='store_true',
                          help='also draw miscellaneous game context clips')

    train = commands.add_parser('train', parents=[common], help='train a model')
    train.add_argument('--manifest', type=Path, help='train on a generated dataset')

    evaluate = commands.add_parser('eval', parents=[common], help='score a trained run')
    evaluate.add_argument('run', type=Path, nargs='+', help='run directories')
    evaluate.add_argument('--manifest', type=Path, help='score every clip of a dataset')

    compare = commands.add_parser('compare', parents=[common],
                                  help='joint versus single task F1 deltas')
    compare.add_argument('--joint', type=Path, help='run directory of the joint model')
    compare.add_argument('--single', type=Path, nargs='+',
                         help='run directories of the single task models')
    compare.add_argument('--manifest', type=Path, help='score every clip of a dataset')
    compare.add_argument('--fixture', choices=['tableIV'],
                         help='compare the shipped reference F1 values instead')
    compare.add_argument('--model', choices=[k.value for k in FusionKind],
                         help='fusion kind to take from the fixture')
    compare.add_argument('--mode', choices=['exact', 'approx', 'auto'], default='exact',
                         help='Wilcoxon test variant')

    commands.add_parser('params', parents=[common], help='count trainable weights')

    gradcheck = commands.add_parser('gradcheck', parents=[common],
                                    help='finite-difference check of every layer')
    gradcheck.add_argument('--configs', type=int, default=20,
                           help='random configurations per layer kind')

    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Run configuration from `--config` with command-line overrides applied."""

    config = parse_config(args.config, RunConfig) if args.config else RunConfig()
    data = config.model_dump(mode='json')
    if args.profile is not None:
        data['model']['profile'] = args.profile
    for key in ('fusion', 'task'):
        if getattr(args, key) is not None:
            data['model'][key] = getattr(args, key)
    for key in ('epochs', 'lr'):
        if getattr(args, key) is not None:
            data['optimizer'][key] = getattr(args, key)
    if args.seed is not None:
        data['seed'] = args.seed
    if args.out is not None:
        data['out'] = str(args.out)
    if getattr(args, 'manifest', None) is not None:
        data['data']['manifest'] = str(args.manifest)
    if getattr(args, 'n', None) is not None:
        data['data']['n_clips'] = args.n
    if getattr(args, 'marginals', None) is not None:
        data['data']['marginals'] = str(args.marginals)
    if getattr(args, 'include_misc', False):
        data['data']['include_misc'] = True
    return RunConfig.model_validate(data)


def cmd_generate(args, config: RunConfig) -> int:
    directory = Path(config.out)
    if (directory / 'manifest.jsonl').exists():
        raise ConfigError(f'{directory} already holds a dataset')

    if config.data.marginals is not None:
        marginals = load_marginals(config.data.marginals)
    else:
        marginals = Marginals.table_i(include_misc=config.data.include_misc)
    records = synth_generate(config.seed, config.data.n_clips, config.model.profile, marginals)
    write_dataset(records, directory)
    print(f'Wrote {len(records)} clips to {directory}.')

    for head in ('valence', 'arousal', 'context'):
        counts = label_counts(records, head)
        labels = list(head_classes(head))
        if config.data.include_misc:
            labels = list(type(labels[0]))
        for label in labels:
            share = counts[label] / len(records) if records else 0.0
            print(f'  {head:8s} {label.name.lower():18s} {counts[label]:6d}  {share:6.3f}')
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    artifacts = run_training(config)
    _, text = report_render([artifacts.report])
    print(text, end='')
    print(f'Run written to {artifacts.directory}.')
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    reports = [evaluate_run(run, args.manifest) for run in args.run]
    table, text = report_render(reports)
    print(text, end='')
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / 'report.csv').write_text(table)
    return EXIT_OK


def _print_deltas(result: PairedDeltaReport):
    for d in result.deltas:
        print(f'  {d.output:8s} {d.label:18s} {d.joint:6.3f} {d.single:6.3f} {d.delta:+7.3f}')
    test = result.wilcoxon
    print(f'Mean delta {result.mean_delta:+.3f}, Wilcoxon W+ = {test.statistic:g} '
          f'(n = {test.n}, {test.mode}), p = {test.p_value:.4f}')


def write_deltas(result: PairedDeltaReport, directory: Path):
    """Per-class deltas as CSV for plotting, and the whole report as JSON."""

    directory.mkdir(parents=True, exist_ok=True)
    lines = ['output,class,joint,single,delta']
    lines += [f'{d.output},{d.label},{d.joint!r},{d.single!r},{d.delta!r}' for d in result.deltas]
    (directory / 'deltas.csv').write_text('\n'.join(lines) + '\n')
    (directory / 'compare.json').write_text(result.model_dump_json(indent=2))


def cmd_compare(args, config: RunConfig) -> int:
    if args.fixture is not None:
        if args.model is None:
            raise ConfigError('--fixture needs --model')
        joint, single = table_iv_pair(args.model)
    else:
        if args.joint is None or not args.single:
            raise ConfigError('compare needs --joint and --single runs, or --fixture')
        joint = evaluate_run(args.joint, args.manifest)
        singles = [evaluate_run(run, args.manifest) for run in args.single]
        single = singles[0] if len(singles) == 1 else merge_reports(singles)

    result = delta_report(joint, single, args.mode)
    _print_deltas(result)
    if args.out is not None:
        write_deltas(result, args.out)
    return EXIT_OK


def _print_counts(spec: ModelSpec):
    model = build_model(spec, np.random.default_rng(0))
    for name, count in count_params(model).items():
        print(f'  {name:24s} {count:12,d}')
    if spec.fusion is FusionKind.TENSOR_TRAIN:
        profile = spec.profile
        tt = TTLayerSpec(input_modes=profile.tt_input_modes, output_modes=profile.tt_output_modes,
                         ranks=profile.tt_ranks, has_bias=profile.tt_bias)
        report = compression_report(tt, profile.view_width)
        print(f'TT layer: {report.tt_params:,d} parameters, dense equivalent '
              f'{report.dense_params:,d}, ratio {report.ratio:.3e}')


def params_table(profile) -> dict[tuple[str, str], int]:
    """Total trainable weights per (task set, fusion kind)."""

    totals = {}
    for task in TaskSet:
        for fusion in FusionKind:
            spec = ModelSpec(fusion=fusion, task=task, profile=profile)
            totals[task.value, fusion.value] = build_model(spec, np.random.default_rng(0)).param_count()
    return totals


def cmd_params(args, config: RunConfig) -> int:
    spec = config.model
    if args.fusion is not None:
        print(f'{spec.fusion.value}/{spec.task.value} model, {spec.profile.name} profile:')
        _print_counts(spec)
        return EXIT_OK

    totals = params_table(spec.profile)
    print(f'{"task":8s}' + ''.join(f'{k.value:>14s}' for k in FusionKind))
    for task in TaskSet:
        print(f'{task.value:8s}' + ''.join(f'{totals[task.value, k.value]:14,d}'
                                           for k in FusionKind))
    ordered = all(totals[t.value, 'early'] > totals[t.value, 'tt'] > totals[t.value, 'late']
                  for t in TaskSet)
    if not ordered:
        logger.error('Parameter counts are not ordered early > tt > late')
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gradcheck(args, config: RunConfig) -> int:
    results = run_gradcheck_suite(seed=config.seed, configs=args.configs)
    for r in results:
        print(f'  {r.name:16s} {r.max_error:10.3e}  {"ok" if r.passed else "FAILED"}')
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f'Gradient check failed for: {", ".join(failed)}')
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    'generate': cmd_generate,
    'train': cmd_train,
    'eval': cmd_eval,
    'compare': cmd_compare,
    'params': cmd_params,
    'gradcheck': cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    """Entry point of the ``ttfuse`` command; returns the exit code."""

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(levelname)s %(name)s: %(message)s')

    try:
        config = resolve_config(args)
    except (ValidationError, ValueError, OSError) as e:
        print(f'ttfuse: invalid configuration: {e}', file=sys.stderr)
        return EXIT_CONFIG

    try:
        return COMMANDS[args.command](args, config)
    except (ConfigError, FormatError, ValidationError, OSError) as e:
        print(f'ttfuse: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except (FusionError, ArithmeticError, ValueError) as e:
        print(f'ttfuse: {type(e).__name__}: {e}', file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
