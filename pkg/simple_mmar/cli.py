"""
Command line interface::

    simple_mmar gen-data --out ./data
    simple_mmar train --config exp.yaml --override train.epochs=2
    simple_mmar swa --run ./runs/<run> --top 3
    simple_mmar eval --ckpt ./runs/<run>/swa.bin --tta --passes 2 --size 256
    simple_mmar ensemble-eval --ensemble ./runs/r50 ./runs/r101 --swa-top 3
    simple_mmar sweep --run ./runs/<run> --axis alpha --values 0.01,0.2,1.0

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""
import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from torch.utils.data import DataLoader

from simple_mmar import __version__
from simple_mmar.config import load_config, runs_root, write_config
from simple_mmar.errors import ConfigError, MMARError
from simple_mmar.mm_data import (MOTION_PATTERNS, MultimodalDataset, gen_synthetic, load_index,
                                 stratified_split)
from simple_mmar.reports import format_table, plot_confusion
from simple_mmar.scoring import (SWEEP_AXES, CheckpointSet, evaluate, resolve_member, swa_average,
                                 sweep, write_results)
from simple_mmar.training import train
from simple_mmar.tsm_model import build_model

LOGGER = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s | %(levelname)s | %(name)s | %(message)s'
EVAL_SPLITS = ('val', 'train', 'test', 'all')


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, '{}: error: {}\n'.format(self.prog, message))


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError('must be at least 1, got {}'.format(value))
    return value


def _float_list(text):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError('expected comma separated numbers, got "{}"'.format(text))


def build_parser():
    parser = ArgumentParser(prog='simple_mmar',
                            description='Multimodal temporal-shift action recognition.')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    parser.add_argument('-q', '--quiet', action='store_true', help='warnings only')
    parser.add_argument('--runs', help='run directory root (default $SIMPLE_MMAR_RUNS or ./runs)')
    commands = parser.add_subparsers(dest='command', parser_class=ArgumentParser)
    commands.required = True

    gen = commands.add_parser('gen-data', help='write a synthetic multimodal dataset')
    gen.add_argument('--out', required=True, help='dataset directory')
    gen.add_argument('--clips', type=int, default=30)
    gen.add_argument('--classes', type=int, default=3)
    gen.add_argument('--frames', type=int, default=16)
    gen.add_argument('--size', type=int, default=64)
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--test-clips', type=int, default=0, help='extra clips in the "test" split')
    gen.add_argument('--depth-noise-only', action='store_true', help='DEPTH frames carry noise only')
    gen.add_argument('--force', action='store_true', help='overwrite an existing dataset')
    gen.set_defaults(handler=cmd_gen_data)

    trainer = commands.add_parser('train', help='train a model, one checkpoint per epoch')
    _add_config_args(trainer)
    trainer.add_argument('--out', help='run directory (default <runs>/<hash>-<time>)')
    trainer.add_argument('--force', action='store_true', help='reuse a non-empty run directory')
    trainer.set_defaults(handler=cmd_train)

    swa = commands.add_parser('swa', help='average the best checkpoints of a run')
    swa.add_argument('--run', required=True, help='run directory')
    swa.add_argument('--top', type=_positive_int, default=3)
    swa.add_argument('--out', help='checkpoint file (default <run>/swa.bin)')
    swa.add_argument('--no-bn-refresh', action='store_true',
                     help='keep averaged batch-norm statistics instead of recomputing them')
    swa.add_argument('--data', help='dataset root (default from the run config)')
    swa.add_argument('--force', action='store_true')
    swa.set_defaults(handler=cmd_swa)

    for name, handler, min_members in (('eval', cmd_eval, 1), ('ensemble-eval', cmd_eval, 2)):
        evaluator = commands.add_parser(name, help='score checkpoints with the inference stack')
        _add_eval_args(evaluator)
        evaluator.add_argument('--plot', action='store_true', help='write confusion.png')
        evaluator.set_defaults(handler=handler, min_members=min_members)

    sweeper = commands.add_parser('sweep', help='re-evaluate across one axis')
    _add_eval_args(sweeper)
    sweeper.add_argument('--axis', required=True, choices=SWEEP_AXES)
    sweeper.add_argument('--values', type=_float_list, default=None,
                         help='comma separated axis values (stack: full-resolution size)')
    sweeper.set_defaults(handler=cmd_sweep, min_members=1)
    return parser


def _add_config_args(parser):
    parser.add_argument('--config', help='YAML experiment config')
    parser.add_argument('-o', '--override', action='append', default=[],
                        help='dotted override, e.g. train.epochs=2 (repeatable)')
    parser.add_argument('--data', help='dataset root, same as -o data.root=...')


def _add_eval_args(parser):
    _add_config_args(parser)
    parser.add_argument('--ckpt', nargs='+', default=[], help='checkpoint files')
    parser.add_argument('--run', '--ensemble', dest='runs', nargs='+', default=[],
                        help='run directories (best epoch, or SWA with --swa-top)')
    parser.add_argument('--weights', type=_float_list, help='ensemble member weights')
    parser.add_argument('--swa-top', type=int, default=None, help='SWA of the n best epochs per run')
    parser.add_argument('--split', choices=EVAL_SPLITS, default='val')
    parser.add_argument('--tta', action='store_true', help='average with the flipped view')
    parser.add_argument('--passes', type=_positive_int, default=None, help='2 = twice sampling')
    parser.add_argument('--dense', action='store_true', help='dense strided windows')
    parser.add_argument('--size', type=int, default=None, help='input size (256 = full resolution)')
    parser.add_argument('--scale-size', type=int, default=None)
    parser.add_argument('--alpha', type=float, default=None, help='DEPTH fusion weight')
    parser.add_argument('--segments', type=_positive_int, default=None)
    parser.add_argument('--out', help='output directory (default <runs>/<command>-<hash>-<time>)')
    parser.add_argument('--force', action='store_true')


def setup_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    # basicConfig is a no-op when the root logger already has handlers
    logging.getLogger('simple_mmar').setLevel(level)


def attach_run_log(run_dir):
    handler = logging.FileHandler(str(Path(run_dir) / 'run.log'))
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def prepare_out_dir(path, force):
    """Create ``path``; a non-empty existing directory needs ``force``."""
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())) and not force:
        raise UsageError('{} already exists, use --force to overwrite'.format(path))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _stamp():
    return time.strftime('%Y%m%d-%H%M%S')


def _experiment(args, base=None):
    overrides = list(args.override)
    if args.data:
        overrides.append('data.root={}'.format(args.data))
    if args.config:
        return load_config(args.config, overrides)
    if base is not None:
        return load_config(base, overrides)
    return load_config(None, overrides)


def _run_config_path(location):
    """config.yaml of the run a checkpoint file or run directory belongs to."""
    location = Path(location)
    for candidate in (location, location.parent, location.parent.parent):
        if (candidate / 'config.yaml').is_file():
            return candidate / 'config.yaml'
    return None


def _index_for(cfg, split):
    index = load_index(cfg.data.root, 'test' if split == 'test' else 'train',
                       cfg.data.modalities, cfg.data.channels)
    if split in ('val', 'train'):
        train_index, val_index = stratified_split(index, cfg.data.val_fraction, cfg.seed)
        return val_index if split == 'val' else train_index
    return index


def _bn_loader_for(cfg):
    """Callable building a training-data loader for batch-norm refresh at a model's segment count."""
    def factory(model_cfg):
        index = _index_for(cfg, 'train')
        sampler = dataclasses.replace(cfg.sampler, segments=model_cfg.segments, mode='random', passes=1)
        dataset = MultimodalDataset(index, sampler, cfg.resolved_augment(), train=True, seed=cfg.seed)
        return DataLoader(dataset, batch_size=cfg.train.batch_size, shuffle=False)
    return factory


def cmd_gen_data(args):
    if args.classes < 2:
        raise UsageError('--classes must be at least 2')
    root = gen_synthetic(args.out, n_clips=args.clips, classes=args.classes, frames=args.frames,
                         size=args.size, seed=args.seed, depth_noise_only=args.depth_noise_only,
                         test_clips=args.test_clips, overwrite=args.force)
    rows = [{'label': i, 'class': name, 'dx': d[0], 'dy': d[1]}
            for i, (name, d) in enumerate(MOTION_PATTERNS[:args.classes])]
    print(root)
    print(format_table(rows, ('label', 'class', 'dx', 'dy')), end='')
    return 0


def cmd_train(args):
    cfg = _experiment(args)
    train_index, val_index = stratified_split(
        load_index(cfg.data.root, 'train', cfg.data.modalities, cfg.data.channels),
        cfg.data.val_fraction, cfg.seed)
    cfg = cfg.with_classes(train_index.num_classes)
    out_dir = Path(args.out) if args.out else runs_root(args.runs) / '{}-{}'.format(cfg.digest()[:12], _stamp())
    out_dir = prepare_out_dir(out_dir, args.force)
    attach_run_log(out_dir)
    write_config(cfg, out_dir / 'config.yaml')
    LOGGER.info('run directory %s (config %s)', out_dir, cfg.digest()[:12])

    augment = cfg.resolved_augment()
    train_cfg = cfg.resolved_train()
    train_sampler = dataclasses.replace(cfg.sampler, mode='random', passes=1)
    val_sampler = dataclasses.replace(cfg.sampler, mode='center', passes=1)
    train_set = MultimodalDataset(train_index, train_sampler, augment, train=True, seed=train_cfg.seed)
    val_set = MultimodalDataset(val_index, val_sampler, augment, train=False, seed=train_cfg.seed)
    model = build_model(cfg.model, seed=train_cfg.seed)
    report, checkpoints = train(model, train_set, val_set, train_cfg, out_dir, seed=train_cfg.seed)
    LOGGER.info('best epoch %s (score %.4f)', checkpoints.best().epoch, checkpoints.best().score)
    print(report.summary(), end='')
    print(out_dir)
    return 0


def cmd_swa(args):
    run_dir = Path(args.run)
    config_path = _run_config_path(run_dir)
    ckpts = CheckpointSet.from_run(run_dir)
    out_path = Path(args.out) if args.out else run_dir / 'swa.bin'
    if out_path.exists() and not args.force:
        raise UsageError('{} already exists, use --force to overwrite'.format(out_path))
    bn_loader = None
    if not args.no_bn_refresh:
        if config_path is None:
            raise UsageError('{} has no config.yaml; pass --no-bn-refresh'.format(run_dir))
        overrides = ['data.root={}'.format(args.data)] if args.data else []
        cfg = load_config(config_path, overrides)
        bn_loader = _bn_loader_for(cfg)(cfg.model)
    swa_average(ckpts, args.top, bn_loader=bn_loader, out_path=out_path)
    print(out_path)
    return 0


def _members_and_config(args):
    locations = list(args.ckpt) + list(args.runs)
    if len(locations) < args.min_members:
        raise UsageError('{} needs at least {} model(s), got {}'
                         .format(args.command, args.min_members, len(locations)))
    base = _run_config_path(locations[0]) if locations else None
    cfg = _experiment(args, base=base)
    changes = {}
    for option, name in (('passes', 'passes'), ('size', 'input_size'),
                         ('scale_size', 'scale_size'), ('segments', 'segments'),
                         ('swa_top', 'swa_top'), ('weights', 'member_weights')):
        if getattr(args, option) is not None:
            changes[name] = getattr(args, option)
    if args.tta:
        changes['tta_flip'] = True
    if args.dense:
        changes['dense'] = True
    if args.alpha is not None:
        changes['fusion'] = dataclasses.replace(cfg.eval.fusion, alpha=args.alpha)
    eval_cfg = dataclasses.replace(cfg.eval, **changes)
    weights = eval_cfg.member_weights or [1.0] * len(locations)
    if len(weights) != len(locations):
        raise UsageError('--weights has {} values for {} models'.format(len(weights), len(locations)))
    bn_loader_for = _bn_loader_for(cfg) if eval_cfg.swa_top else None
    members = [resolve_member(location, weight=weight, swa_top=eval_cfg.swa_top if Path(location).is_dir() else 0,
                              bn_loader_for=bn_loader_for)
               for location, weight in zip(locations, weights)]
    return members, cfg, eval_cfg


def _eval_out_dir(args, cfg):
    if args.out:
        return prepare_out_dir(args.out, args.force)
    name = '{}-{}-{}'.format(args.command, cfg.digest()[:12], _stamp())
    return prepare_out_dir(runs_root(args.runs) / name, args.force)


def cmd_eval(args):
    members, cfg, eval_cfg = _members_and_config(args)
    index = _index_for(cfg, args.split)
    out_dir = _eval_out_dir(args, cfg)
    attach_run_log(out_dir)
    result = evaluate(members, index, eval_cfg, cfg.resolved_augment())
    config = {'experiment': cfg.to_dict(), 'eval': dataclasses.asdict(eval_cfg),
              'members': [{'name': m.name, 'weight': m.weight} for m in members], 'split': args.split}
    write_results(result, out_dir / 'results.json', config=config, classes=index.classes)
    if args.plot:
        plot_confusion(result['confusion'], index.classes, out_dir / 'confusion.png')
    print('top1 {:.4f} top5 {:.4f}'.format(result['top1'], result['top5']))
    print(out_dir)
    return 0


def cmd_sweep(args):
    if args.axis in ('epochs', 'stack'):
        if not args.runs:
            raise UsageError('--axis {} needs --run'.format(args.axis))
        base = _run_config_path(args.runs[0])
        cfg = _experiment(args, base=base)
        eval_cfg = cfg.eval
        if args.swa_top is not None:
            eval_cfg = dataclasses.replace(eval_cfg, swa_top=args.swa_top)
        members = None
    else:
        members, cfg, eval_cfg = _members_and_config(args)
    if args.axis not in ('epochs', 'stack') and not args.values:
        raise UsageError('--axis {} needs --values'.format(args.axis))
    values = args.values
    if values and args.axis in ('segments', 'input_size', 'epochs', 'stack'):
        values = [int(v) for v in values]
    index = _index_for(cfg, args.split)
    out_dir = _eval_out_dir(args, cfg)
    attach_run_log(out_dir)
    rows = sweep(args.axis, values, index, eval_cfg, cfg.resolved_augment(), out_dir,
                 members=members, runs=args.runs, bn_loader_for=_bn_loader_for(cfg))
    columns = ('stage', 'top1', 'top5') if args.axis == 'stack' else ('value', 'top1', 'top5')
    print(format_table(rows, columns), end='')
    print(out_dir)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    root = logging.getLogger()
    handlers = list(root.handlers)
    try:
        return args.handler(args)
    except (UsageError, ConfigError) as exc:
        print('simple_mmar {}: error: {}'.format(args.command, exc), file=sys.stderr)
        return 1
    except (MMARError, OSError) as exc:
        print('simple_mmar {}: {}: {}'.format(args.command, type(exc).__name__, exc), file=sys.stderr)
        return 2
    finally:
        for handler in root.handlers[:]:
            if handler not in handlers:
                root.removeHandler(handler)
                handler.close()


if __name__ == '__main__':
    sys.exit(main())
