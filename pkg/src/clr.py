"""
Command line entry point for continual local replacement experiments.

    python src/clr.py train   [--config FILE] [--key=value ...]
    python src/clr.py eval    [--train-if-missing] [--key=value ...]
    python src/clr.py ablate  (--grid | --methods blockaug,randera,blockdef) [--key=value ...]
    python src/clr.py synth-data --output DIR
    python src/clr.py dump-aug --output DIR [--count N] [--stage train|finetune]
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from bench import (ProtocolResult, RunConfig, ablation_grid, compare_methods, dump_embeddings, format_table,
                   load_datasets, run_protocol, train_for_run, write_grid_report, write_report)
from config import load_run_config
from data import encode_image, export_dataset, sample_episode
from errors import CLRError, UsageError
from model import ModelState, load_model, save_model
from pipeline import oracle_pool, select_sources, synthesize_support
from replacement import METHOD_NAMES, synthesize_training_image

logger = logging.getLogger(__name__)


def _block_list(text: str):
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"expected a comma separated list of block counts, got '{text}'")


def train_and_save(config: RunConfig) -> ModelState:
    train, _, _ = load_datasets(config)
    print(f"Training backbone on {len(train)} images from {len(train.classes)} classes...")
    model = train_for_run(config, train)
    path = save_model(model, config.checkpoint_path)
    final = model.loss_history[-1] if model.loss_history else float("nan")
    print(f"✓ Backbone saved to {path} (final loss {final:.4f})")
    return model


def obtain_model(config: RunConfig, train_if_missing: bool) -> ModelState:
    path = config.checkpoint_path
    if path.exists():
        print(f"Loading backbone from {path}")
        return load_model(path)
    if not train_if_missing:
        raise UsageError(f"no backbone checkpoint at '{path}'; run 'train' first or pass --train-if-missing")
    return train_and_save(config)


def cmd_train(args, config: RunConfig) -> None:
    train_and_save(config)


def cmd_eval(args, config: RunConfig) -> None:
    model = obtain_model(config, args.train_if_missing)
    _, _, test = load_datasets(config)
    print(f"Evaluating {', '.join(v.value for v in config.variants)} on {config.num_episodes} episodes "
          f"({config.episode.n}-way {config.episode.k}-shot, t={config.episode.t}, u={config.episode.u})")
    result = run_protocol(config, model, test)
    for path in write_report(result, config.out_dir):
        print(f"✓ Wrote {path}")
    if config.embeddings:
        path = dump_embeddings(model, test, Path(config.out_dir) / 'embeddings.csv', result.embeddings)
        print(f"✓ Wrote {path}")
    print()
    print(format_table(list(result.summaries.values())), end="")


def cmd_ablate(args, config: RunConfig) -> None:
    train, _, test = load_datasets(config)
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        model = obtain_model(config, args.train_if_missing)
        summaries = compare_methods(methods, config, model, test)
        result = ProtocolResult(summaries=summaries, losses={},
                                accuracies={name: s.accuracies for name, s in summaries.items()})
        paths = write_report(result, config.out_dir)
        table = format_table(list(summaries.values()))
    else:
        grid = ablation_grid(_block_list(args.train_blocks), _block_list(args.finetune_blocks), config, train, test)
        paths = write_grid_report(grid, config.out_dir)
        table = paths[1].read_text(encoding="utf-8")
    for path in paths:
        print(f"✓ Wrote {path}")
    print()
    print(table, end="")


def cmd_synth_data(args, config: RunConfig) -> None:
    s = config.synthetic
    datasets = load_datasets(replace(config, dataset_root=None))
    split_file = export_dataset(datasets, args.output)
    print(f"✓ Exported {sum(len(d) for d in datasets)} images ({s.classes} classes) to {args.output}")
    print(f"✓ Split file: {split_file}")


def cmd_dump_aug(args, config: RunConfig) -> None:
    """Before/after PNG pairs of local replacement for visual inspection"""
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.master_seed)
    train, _, test = load_datasets(config)
    pairs = []
    if args.stage == "train":
        for index in rng.choice(len(train), size=min(args.count, len(train)), replace=False):
            outcome = synthesize_training_image(int(index), train, config.train.method, rng)
            pairs.append((int(train.ids[index]), train.images[index], outcome.image, outcome.source_id))
    else:
        while len(pairs) < args.count:
            episode = sample_episode(test, config.episode, rng)
            pool = oracle_pool(episode, "dump-aug visual inspection")
            donors = select_sources(episode.support_labels, pool, rng)
            synthesized = synthesize_support(episode.support_images, episode.unlabeled_images, donors,
                                             config.finetune.method, rng, episode.unlabeled_ids)
            for i, donor in enumerate(donors):
                source_id = int(episode.unlabeled_ids[donor]) if donor is not None else -1
                pairs.append((int(episode.support_ids[i]), episode.support_images[i], synthesized.images[i],
                              source_id))
        pairs = pairs[:args.count]
    for number, (sample_id, before, after, source_id) in enumerate(pairs):
        encode_image(before, out / f"{number:03d}_{sample_id}_before.png")
        encode_image(after, out / f"{number:03d}_{sample_id}_after_from_{source_id}.png")
    print(f"✓ Wrote {len(pairs)} before/after pairs ({args.stage} stage) to {out}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument('--config', help='key=value config file; --key=value flags override it')
    common.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    common.add_argument('-q', '--quiet', action='store_true', help='No progress bars, warnings only')

    parser = argparse.ArgumentParser(description='Continual local replacement for few-shot classification',
                                     allow_abbrev=False)
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', parents=[common], allow_abbrev=False,
                       help='Train the backbone and save a checkpoint (bench.checkpoint)')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', parents=[common], allow_abbrev=False,
                       help='Run the episodic protocol for every configured variant')
    p.add_argument('--train-if-missing', action='store_true', help='Train the backbone when no checkpoint exists')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('ablate', parents=[common], allow_abbrev=False,
                       help='Block-count grid or replacement-operator comparison')
    mode = p.add_mutually_exclusive_group()
    mode.add_argument('--grid', action='store_true', help='Train/fine-tune block-count grid (default)')
    mode.add_argument('--methods', help=f'Comma separated operators to compare, from {", ".join(METHOD_NAMES)}')
    p.add_argument('--train-blocks', default='0,1,2,3,4', help='Training block caps for --grid (default: 0,1,2,3,4)')
    p.add_argument('--finetune-blocks', default='0,2,4,6',
                   help='Fine-tune block caps for --grid (default: 0,2,4,6)')
    p.add_argument('--train-if-missing', action='store_true', help='Train the backbone when no checkpoint exists')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('synth-data', parents=[common], allow_abbrev=False,
                       help='Export the synthetic benchmark as class directories plus a split file')
    p.add_argument('-o', '--output', required=True, help='Output directory')
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser('dump-aug', parents=[common], allow_abbrev=False,
                       help='Write before/after PNG pairs of local replacement')
    p.add_argument('-o', '--output', required=True, help='Output directory')
    p.add_argument('-n', '--count', type=int, default=16, help='Number of pairs (default: 16)')
    p.add_argument('--stage', choices=['train', 'finetune'], default='train',
                   help='Training-stage donors or fine-tune donors from an episode (default: train)')
    p.set_defaults(func=cmd_dump_aug)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, overrides = parser.parse_known_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')
    try:
        config = load_run_config(args.config, overrides, progress=not args.quiet)
        args.func(args, config)
    except CLRError as e:
        print(f"Error: {e}")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
