"""
Command-line entry point: dataset generation, training, evaluation, baselines,
ablations and visualization export.
"""

import argparse
import json
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import Config
from errors import CheckpointError, ConfigError, DatasetNotFoundError, FSSDError
from fssd import ATTENTION_MODES, DECODER_MODES
from logger_config import log_environment_info, setup_logger
from shapegen import NUM_CLASSES, load_split, sample_episode, split_classes, write_dataset
from trainer import (CHECKPOINT_NAME, TrainConfig, evaluate, evaluate_checkpoint, load_model,
                     run_baseline, train)
from visualize import write_interpolation, write_match_panel, write_primitive_grid

logger = setup_logger('main')

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _comma_list(cast):
    def parse(value: str):
        try:
            return [cast(item) for item in value.split(',') if item]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e))
    return parse


def _add_episode_flags(parser: argparse.ArgumentParser, config: Config, episodes: int):
    parser.add_argument('--root', default=config.DATA_ROOT, help='dataset root written by gen')
    parser.add_argument('--seed', type=int, default=config.SEED, help='seed behind all randomness')
    parser.add_argument('--ways', type=int, default=5, help='classes per episode')
    parser.add_argument('--shots', type=int, default=1, help='support samples per class')
    parser.add_argument('--queries', type=int, default=15, help='query samples per class')
    parser.add_argument('--episodes', type=int, default=episodes, help='number of episodes')


def _add_model_flags(parser: argparse.ArgumentParser, defaults: bool = True):
    parser.add_argument('--primitives', type=int, default=60 if defaults else None, help='primitive bank size N')
    parser.add_argument('--heads', type=int, default=4 if defaults else None, help='attention heads')
    parser.add_argument('--embed-dim', type=int, default=64 if defaults else None, help='feature width d')
    parser.add_argument('--decoder', choices=DECODER_MODES, default='both' if defaults else None,
                        help='decoder heads trained')
    parser.add_argument('--attention', choices=ATTENTION_MODES, default='dual' if defaults else None,
                        help='primitive attention variant')
    parser.add_argument('--backbone', choices=('gcnn', 'plain'), default='gcnn' if defaults else None,
                        help='embedding network')


def _add_schedule_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--lr', type=float, default=1e-3, help='Adam learning rate')
    parser.add_argument('--lr-decay-factor', type=float, default=0.5, help='step decay multiplier')
    parser.add_argument('--lr-decay-every', type=int, default=1000, help='episodes between decays')
    parser.add_argument('--align-loss', action='store_true', help="add MSE(Q'_H, Q) to the loss")
    parser.add_argument('--checkpoint-every', type=int, default=500, help='episodes between checkpoints')


def build_parser(config: Optional[Config] = None) -> argparse.ArgumentParser:
    config = config or Config()
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog='fssd', description='Few-shot shape recognition toolkit',
                                     formatter_class=formatter)
    parser.add_argument('--progress', action='store_true', help='show progress bars')
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen', help='render the shape dataset', formatter_class=formatter)
    gen.add_argument('--root', default=config.DATA_ROOT, help='output dataset root')
    gen.add_argument('--per-class', type=int, default=config.PER_CLASS, help='samples per class')
    gen.add_argument('--size', type=int, default=config.IMAGE_SIZE, help='raster height and width')
    gen.add_argument('--seed', type=int, default=config.SEED, help='generation seed')
    gen.add_argument('--train-classes', type=int, default=15, help='classes in the train split')
    gen.add_argument('--test-classes', type=int, default=10, help='classes in the test split')

    train_cmd = commands.add_parser('train', help='episodic training', formatter_class=formatter)
    _add_episode_flags(train_cmd, config, episodes=3000)
    _add_model_flags(train_cmd)
    _add_schedule_flags(train_cmd)
    train_cmd.add_argument('--out', default=config.OUTPUT_DIR, help='run directory for checkpoint and curves')

    eval_cmd = commands.add_parser('eval', help='evaluate a checkpoint on the test split', formatter_class=formatter)
    _add_episode_flags(eval_cmd, config, episodes=500)
    _add_model_flags(eval_cmd, defaults=False)
    eval_cmd.add_argument('--checkpoint', default=os.path.join(config.OUTPUT_DIR, CHECKPOINT_NAME),
                          help='checkpoint to evaluate')
    eval_cmd.add_argument('--split', default='test', help='split to draw episodes from')
    eval_cmd.add_argument('--out', default=None, help='report path (stdout when omitted)')

    baseline = commands.add_parser('baseline', help='classical descriptor baseline', formatter_class=formatter)
    baseline.add_argument('--kind', choices=('hu', 'fourier', 'sc'), default='hu', help='descriptor')
    _add_episode_flags(baseline, config, episodes=500)
    baseline.add_argument('--split', default='test', help='split to draw episodes from')
    baseline.add_argument('--out', default=None, help='report path (stdout when omitted)')

    ablate = commands.add_parser('ablate', help='train and evaluate an ablation matrix', formatter_class=formatter)
    _add_episode_flags(ablate, config, episodes=3000)
    _add_schedule_flags(ablate)
    ablate.add_argument('--heads', type=int, default=4, help='attention heads')
    ablate.add_argument('--embed-dim', type=int, default=64, help='feature width d')
    ablate.add_argument('--eval-episodes', type=int, default=500, help='test episodes per cell')
    ablate.add_argument('--decoders', type=_comma_list(str), default=list(DECODER_MODES), help='decoder axis')
    ablate.add_argument('--attentions', type=_comma_list(str), default=list(ATTENTION_MODES), help='attention axis')
    ablate.add_argument('--backbones', type=_comma_list(str), default=['gcnn'], help='backbone axis')
    ablate.add_argument('--primitive-counts', type=_comma_list(int), default=[60], help='primitive count axis')
    ablate.add_argument('--out', default=os.path.join(config.OUTPUT_DIR, 'ablation'), help='ablation directory')

    viz_primitives = commands.add_parser('viz-primitives', help='decode primitive interpolations',
                                         formatter_class=formatter)
    viz_primitives.add_argument('--checkpoint', default=os.path.join(config.OUTPUT_DIR, CHECKPOINT_NAME),
                                help='trained checkpoint')
    viz_primitives.add_argument('--i', type=int, default=0, help='primitive at alpha = 1')
    viz_primitives.add_argument('--j', type=int, default=1, help='primitive at alpha = 0')
    viz_primitives.add_argument('--out', default=os.path.join(config.OUTPUT_DIR, 'primitives'),
                                help='output directory')

    viz_match = commands.add_parser('viz-match', help='query/support matching panel', formatter_class=formatter)
    viz_match.add_argument('--checkpoint', default=os.path.join(config.OUTPUT_DIR, CHECKPOINT_NAME),
                           help='trained checkpoint')
    viz_match.add_argument('--root', default=config.DATA_ROOT, help='dataset root written by gen')
    viz_match.add_argument('--split', default='test', help='split to draw the episode from')
    viz_match.add_argument('--seed', type=int, default=config.SEED, help='episode seed')
    viz_match.add_argument('--ways', type=int, default=5, help='classes in the panel')
    viz_match.add_argument('--shots', type=int, default=1, help='support samples per class')
    viz_match.add_argument('--out', default=os.path.join(config.OUTPUT_DIR, 'match.png'), help='panel PNG path')

    return parser


def _train_config(args: argparse.Namespace, **overrides) -> TrainConfig:
    fields = dict(
        ways=args.ways, shots=args.shots, queries=args.queries, episodes=args.episodes,
        lr=args.lr, lr_decay_factor=args.lr_decay_factor, lr_decay_every=args.lr_decay_every,
        seed=args.seed, heads=args.heads, embed_dim=args.embed_dim, align_loss=args.align_loss,
        checkpoint_every=args.checkpoint_every,
    )
    fields.update(overrides)
    return TrainConfig(**fields)


def _eval_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(ways=args.ways, shots=args.shots, queries=args.queries,
                       eval_episodes=args.episodes, seed=args.seed)


def _emit(payload: Dict, out: Optional[str]):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        directory = os.path.dirname(out)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(out, 'w', encoding='utf-8') as handle:
            handle.write(text + '\n')
        logger.info(f"Report written to {out}")
    else:
        print(text)


def _require_checkpoint(path: str):
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}; run 'train' first or pass --checkpoint")


def cmd_gen(args: argparse.Namespace) -> int:
    errors = []
    if args.train_classes < 0 or args.test_classes < 0:
        errors.append("class counts must be non-negative")
    elif args.train_classes + args.test_classes > NUM_CLASSES:
        errors.append(f"--train-classes {args.train_classes} + --test-classes {args.test_classes} "
                      f"exceed the library of {NUM_CLASSES} classes")
    if args.per_class < 1:
        errors.append("--per-class must be at least 1")
    if errors:
        raise ConfigError("Generation settings invalid:\n" + "\n".join(f"- {e}" for e in errors))
    train_classes, test_classes = split_classes(args.train_classes, args.test_classes, args.seed)
    count = write_dataset(args.root, train_classes, test_classes, args.per_class, args.size, args.seed,
                          progress=args.progress)
    logger.info(f"Generated {count} samples ({len(train_classes)} train / {len(test_classes)} test classes)")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args, primitives=args.primitives, decoder=args.decoder,
                           attention=args.attention, backbone=args.backbone)
    config.validate()
    split = load_split(args.root, 'train')
    train(config, split, args.out, progress=args.progress)
    logger.info(f"Training finished; artifacts in {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _require_checkpoint(args.checkpoint)
    config = _eval_config(args)
    split = load_split(args.root, args.split)
    expected = {field: getattr(args, field) for field in
                ('primitives', 'heads', 'embed_dim', 'decoder', 'attention', 'backbone')}
    report = evaluate_checkpoint(args.checkpoint, split, config, expected, progress=args.progress)
    _emit(report.to_dict(), args.out)
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    config = _eval_config(args)
    split = load_split(args.root, args.split)
    report = run_baseline(args.kind, split, config, progress=args.progress)
    payload = {'accuracy_mean': report.accuracy_mean, 'accuracy_ci95': report.accuracy_ci95,
               'episodes': report.episodes, 'kind': args.kind}
    _emit(payload, args.out)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    for name, values, allowed in (('decoders', args.decoders, DECODER_MODES),
                                  ('attentions', args.attentions, ATTENTION_MODES),
                                  ('backbones', args.backbones, ('gcnn', 'plain'))):
        unknown = sorted(set(values) - set(allowed))
        if unknown:
            raise argparse.ArgumentTypeError(f"--{name}: unknown values {unknown}")
    cells = [
        dict(backbone=backbone, primitives=primitives, decoder=decoder, attention=attention)
        for backbone in args.backbones
        for primitives in args.primitive_counts
        for decoder in args.decoders
        for attention in args.attentions
    ]
    configs = [_train_config(args, eval_episodes=args.eval_episodes, **cell) for cell in cells]
    for config in configs:
        config.validate()
    train_split = load_split(args.root, 'train')
    test_split = load_split(args.root, 'test')
    rows: List[Dict] = []
    for cell, config in zip(cells, configs):
        tag = f"{cell['backbone']}-n{cell['primitives']}-{cell['decoder']}-{cell['attention']}"
        logger.info(f"Ablation cell {tag}")
        model, _ = train(config, train_split, os.path.join(args.out, tag), progress=args.progress)
        report = evaluate(model, test_split, config, progress=args.progress)
        rows.append({**cell, 'similarity': 'cosine', **report.to_dict()})
    _emit({'cells': rows}, os.path.join(args.out, 'ablation.json'))
    return EXIT_OK


def cmd_viz_primitives(args: argparse.Namespace) -> int:
    _require_checkpoint(args.checkpoint)
    model = load_model(args.checkpoint)
    write_interpolation(model, args.i, args.j, args.out)
    write_primitive_grid(model, os.path.join(args.out, 'primitive_grid.png'))
    return EXIT_OK


def cmd_viz_match(args: argparse.Namespace) -> int:
    _require_checkpoint(args.checkpoint)
    model = load_model(args.checkpoint)
    split = load_split(args.root, args.split)
    episode = sample_episode(split, args.ways, args.shots, 1, np.random.default_rng([args.seed, 3]))
    write_match_panel(model, episode, args.out)
    return EXIT_OK


COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'eval': cmd_eval,
    'baseline': cmd_baseline,
    'ablate': cmd_ablate,
    'viz-primitives': cmd_viz_primitives,
    'viz-match': cmd_viz_match,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one command and return its exit code."""
    config = Config()
    try:
        config.validate()
        args = build_parser(config).parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except FSSDError as e:
        logger.error(str(e))
        return EXIT_USAGE

    if config.LOG_LEVEL.upper() == 'DEBUG':
        log_environment_info()

    try:
        return COMMANDS[args.command](args)
    except (argparse.ArgumentTypeError, ConfigError) as e:
        logger.error(f"usage error: {e}")
        return EXIT_USAGE
    except (DatasetNotFoundError, CheckpointError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except FSSDError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
