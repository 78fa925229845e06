# This file is part of matcontext, local material recognition in global context.
"""Command-line entry point: ``python -m matcontext <command>``."""
import argparse
import dataclasses
import glob
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from .context import Hierarchy
from .cooccurrence import CooccurrenceTable, granularity_study, merge, report, tally_scenes
from .data_io import (CONTEXT_SUFFIX, categories_of, context_path, export_prediction, load_checkpoint, load_scene,
                      read_context, save_checkpoint, save_report, save_scene, write_context, write_label_png)
from .errors import (ConfigError, ContainerError, InvariantViolation, TrainingDivergedError, UnknownLayerError)
from .experiments import (EXPERIMENTS, Benchmark, Cell, ExperimentConfig, external_contexts, load_world, predict_scenes,
                          prepare, run_experiment, train_cell)
from .gradcheck import check_network, check_operations
from .maps import PredictionMap
from .metrics import score, uniform_baseline
from .world import (ORACLE_MODES, WorldSpec, bayes_oracle, default_hierarchy, default_world, generate, make_splits,
                    scene_sources)

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_UNKNOWN_LAYER = 5
EXIT_DIVERGED = 6
EXIT_CONTAINER = 7

# Checked in order; subclasses come before their bases.
EXIT_CODES = (
    (InvariantViolation, EXIT_INVARIANT),
    (UnknownLayerError, EXIT_UNKNOWN_LAYER),
    (TrainingDivergedError, EXIT_DIVERGED),
    (ContainerError, EXIT_CONTAINER),
    (FileNotFoundError, EXIT_MISSING_FILE),
    (ValueError, EXIT_CONFIG),
)

EPILOG = '''exit codes:
  0  success
  1  an invariant or acceptance check failed
  2  usage error
  3  malformed config or invalid argument
  4  missing file
  5  unknown injection layer
  6  training diverged
  7  malformed container or label file
'''


def exit_code(error: BaseException) -> Optional[int]:
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    return None


def load_config(path: Optional[str], **overrides) -> ExperimentConfig:
    """ExperimentConfig from a JSON file (or the defaults) with CLI overrides applied."""
    data: Dict = {}
    if path:
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as error:
                raise ConfigError(f'Config {path} is not valid JSON: {error}') from error
        if not isinstance(data, dict):
            raise ConfigError(f'Config {path} must hold a JSON object')
    data.update({key: value for key, value in overrides.items() if value is not None})
    return ExperimentConfig.from_dict(data)


def _world(path: Optional[str]) -> WorldSpec:
    return WorldSpec.load(path) if path else default_world()


def _hierarchy(path: Optional[str]) -> Hierarchy:
    return Hierarchy.load(path) if path else default_hierarchy()


def _out(args: argparse.Namespace) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_synth_gen(args: argparse.Namespace) -> int:
    spec = _world(args.world)
    scenes = generate(spec, args.count, args.size, seed=args.seed, threads=args.threads)
    train, val, test = make_splits(scenes, args.train_fraction, args.seed)
    out = _out(args)
    spec.save(os.path.join(out, 'world.json'))
    for scene in scenes:
        stem = os.path.join(out, f'scene_{scene.index:04d}')
        save_scene(stem + '.ctx', scene, spec)
        write_context(context_path(out, scene.index), scene_sources(scene, spec))
        write_label_png(stem + '.labels.png', scene.labels)
    save_report(os.path.join(out, 'splits.json'), {
        'seed': args.seed, 'size': args.size,
        'train': sorted(s.index for s in train), 'val': sorted(s.index for s in val),
        'test': sorted(s.index for s in test),
    })
    print(f'{len(scenes)} scenes ({len(train)} train, {len(val)} val, {len(test)} test) written to {out}')
    return EXIT_OK


def _cell(args: argparse.Namespace, config: ExperimentConfig) -> Cell:
    layer = args.layer or config.injection_layer
    return Cell(0, args.mode, args.mode, args.mode, layer, args.level, args.resolution)


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, threads=args.threads)
    cell = _cell(args, config)
    bench = prepare(config, args.seed)
    graph, result = train_cell(config, bench, cell, args.seed)
    out = _out(args)
    path = os.path.join(out, 'model.ctx')
    save_checkpoint(path, graph, result.parameters,
                    {'cell': dataclasses.asdict(cell), 'experiment': config.to_dict(), 'seed': args.seed,
                     'categories': {'materials': bench.spec.materials}})
    save_report(os.path.join(out, 'train.json'), {'seed': args.seed, 'cell': dataclasses.asdict(cell),
                                                  'trace': result.trace()})
    print(f'Loss {result.initial_loss:.6f} -> {result.final_loss:.6f}; checkpoint written to {path}')
    return EXIT_OK


def _checkpoint_header(header: Dict, path: str):
    try:
        return ExperimentConfig.from_dict(header['experiment']), Cell(**header['cell']), int(header['seed'])
    except (KeyError, TypeError) as error:
        raise ContainerError(f'{path} is not a matcontext training checkpoint: {error}') from error


def _read_contexts(bench: Benchmark, cell: Cell, paths: Sequence[str], scenes) -> Optional[List]:
    if cell.mode == 'none':
        return None
    return [external_contexts(bench, cell, read_context(path), scene.height, scene.width)
            for path, scene in zip(paths, scenes)]


def cmd_eval(args: argparse.Namespace) -> int:
    if args.baseline:
        if args.context:
            raise ConfigError('--context needs a checkpoint; the uniform baseline ignores context')
        config = load_config(args.config, threads=args.threads)
        seed = args.seed
        bench = prepare(config, seed)
        predicted = uniform_baseline([s.labels.labels for s in bench.train], [s.labels.labels for s in bench.test],
                                     bench.spec.num_materials)
        echo = {'baseline': 'uniform'}
    else:
        if not args.checkpoint:
            raise ConfigError('eval needs --checkpoint or --baseline uniform')
        graph, container = load_checkpoint(args.checkpoint)
        config, cell, seed = _checkpoint_header(container.header, args.checkpoint)
        bench = prepare(config, seed)
        contexts = None
        if args.context:
            paths = [context_path(args.context, scene.index) for scene in bench.test]
            contexts = _read_contexts(bench, cell, paths, bench.test)
        probs = predict_scenes(graph, None, bench, bench.test, cell, config.noisy_context, contexts=contexts)
        predicted = list(probs.argmax(axis=1))
        echo = {'checkpoint': os.path.basename(args.checkpoint), 'cell': dataclasses.asdict(cell),
                'context': 'file' if args.context else 'generated'}
    metrics = score(predicted, [s.labels.labels for s in bench.test], bench.spec.num_materials, echo, seed)
    metrics.check()
    save_report(os.path.join(_out(args), 'eval.json'), metrics.to_dict())
    print(f'accuracy {metrics.accuracy:.4f}  mean class accuracy {metrics.mean_class_accuracy:.4f}')
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    graph, container = load_checkpoint(args.checkpoint)
    config, cell, _ = _checkpoint_header(container.header, args.checkpoint)
    scene, _ = load_scene(args.scene)
    if scene.image is None:
        raise ContainerError(f'{args.scene} holds no image to predict on')
    spec, hierarchy = load_world(config)
    bench = Benchmark(spec, hierarchy, [], [], [scene])
    contexts = _read_contexts(bench, cell, [args.context], [scene]) if args.context else None
    probs = predict_scenes(graph, None, bench, [scene], cell, config.noisy_context, contexts=contexts)[0]
    prediction = PredictionMap(probs)
    out = args.output or os.path.splitext(args.scene)[0] + '.prediction.ppm'
    export_prediction(out, prediction, spec.materials)
    if scene.labels.labeled_count():
        correct = (prediction.argmax == scene.labels.labels)[scene.labels.mask].mean()
        print(f'{out}: pixel accuracy {correct:.4f}')
    else:
        print(out)
    return EXIT_OK


def _scene_tables(paths: Sequence[str]) -> Dict[str, CooccurrenceTable]:
    tables: Dict[str, List[CooccurrenceTable]] = {'object': [], 'place': []}
    for path in paths:
        scene, container = load_scene(path)
        materials = categories_of(container, 'materials')
        tables['object'].append(tally_scenes([scene], materials, categories_of(container, 'objects'), 'object'))
        tables['place'].append(tally_scenes([scene], materials, categories_of(container, 'places'), 'place'))
    return {kind: merge(parts) for kind, parts in tables.items()}


def cmd_stats(args: argparse.Namespace) -> int:
    out = _out(args)
    if args.table:
        tables = {'table': CooccurrenceTable.load_csv(args.table)}
    else:
        paths = sorted(path for path in glob.glob(os.path.join(args.scenes, 'scene_*.ctx'))
                       if not path.endswith(CONTEXT_SUFFIX))
        if not paths:
            raise FileNotFoundError(f'No scene containers in {args.scenes}')
        tables = _scene_tables(paths)
    summary = {}
    for kind, table in tables.items():
        table.save_csv(os.path.join(out, f'{kind}_cooccurrence.csv'))
        summary[kind] = report(table, args.alpha).to_dict()
        print(f'{kind}: H(M)={summary[kind]["marginal_entropy"]:.4f} '
              f'H(M|C)={summary[kind]["expected_entropy"]:.4f} nats')
    hierarchy = _hierarchy(args.hierarchy)
    place_table = tables.get('place', tables.get('table'))
    if all(context in hierarchy.parents for context in place_table.contexts):
        levels = granularity_study(place_table, hierarchy)
        summary['granularity'] = dict(levels)
        print('granularity: ' + ', '.join(f'{level}={value:.4f}' for level, value in levels.items()))
    save_report(os.path.join(out, 'stats.json'), summary)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    reports = check_operations(args.seed, args.epsilon, args.op_tolerance)
    reports += [dataclasses.replace(r, op_name='network/' + r.op_name)
                for r in check_network(args.seed, args.epsilon, args.tolerance)]
    for r in reports:
        print(r)
    failed = [r.op_name for r in reports if not r.passed]
    if failed:
        raise InvariantViolation(f'{len(failed)} gradient checks failed: ' + ', '.join(failed))
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    spec = _world(args.world)
    hierarchy = _hierarchy(args.hierarchy)
    modes = {mode: bayes_oracle(spec, mode) for mode in ORACLE_MODES}
    members = spec.ambiguous_materials()
    ambiguous = None
    if members:
        ambiguous = {mode: bayes_oracle(spec, mode, restrict_to=members) for mode in ORACLE_MODES}
    levels = None
    if all(place in hierarchy.parents for place in spec.places):
        levels = {level: bayes_oracle(spec, 'place', hierarchy, level) for level in hierarchy.levels}
    for name, values in (('oracle', modes), ('ambiguous pixels', ambiguous), ('place by level', levels)):
        if values is None:
            print(f'{name}: none')
            continue
        print(name + ': ' + ', '.join(f'{key}={value} ({float(value):.4f})' for key, value in values.items()))
    if args.out:
        def exact(values):
            return None if values is None else {key: str(value) for key, value in values.items()}

        save_report(os.path.join(_out(args), 'oracle.json'), {
            'ambiguity_rate': str(spec.ambiguity()),
            'oracle': exact(modes),
            'ambiguous_pixel_oracle': exact(ambiguous),
            'hierarchy_place_oracle': exact(levels),
        })
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    config = load_config(args.config, threads=args.threads, repeats=args.repeats,
                         assertions=False if args.no_assertions else None)
    result = run_experiment(args.name, config, args.seed, args.out)
    print(result.markdown(), end='')
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='experiment config JSON file')
    common.add_argument('--seed', type=int, default=0, help='random seed (default 0)')
    common.add_argument('--out', default='out', help='output directory (default out)')
    common.add_argument('--threads', type=int, default=1, help='worker threads (default 1)')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v for progress, -vv for debug')

    parser = argparse.ArgumentParser(prog='matcontext', description='Local material recognition in global context.',
                                     epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    def command(name: str, handler, help: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[common], help=help, epilog=EPILOG,
                                  formatter_class=argparse.RawDescriptionHelpFormatter)
        sub.set_defaults(handler=handler)
        return sub

    sub = command('synth-gen', cmd_synth_gen, 'generate synthetic scenes')
    sub.add_argument('--world', help='WorldSpec JSON (default: built-in world)')
    sub.add_argument('--count', type=int, default=100)
    sub.add_argument('--size', type=int, default=32)
    sub.add_argument('--train-fraction', type=float, default=0.8)

    sub = command('train', cmd_train, 'train one context model')
    sub.add_argument('--mode', choices=ORACLE_MODES, default='both', help='context given to the network')
    sub.add_argument('--layer', help='injection layer (default from config)')
    sub.add_argument('--level', default='leaf', help='hierarchy level of place context')
    sub.add_argument('--resolution', type=int, default=1, help='context downsampling factor')

    sub = command('eval', cmd_eval, 'score a checkpoint or a baseline on held-out scenes')
    sub.add_argument('--checkpoint')
    sub.add_argument('--baseline', choices=['uniform'])
    sub.add_argument('--context', help='directory of scene context files (default: generated context)')

    sub = command('predict', cmd_predict, 'write a color-coded material map for one scene')
    sub.add_argument('--checkpoint', required=True)
    sub.add_argument('--scene', required=True, help='scene container written by synth-gen')
    sub.add_argument('--output', help='PPM path (default next to the scene)')
    sub.add_argument('--context', help='context file of the scene (default: generated context)')

    sub = command('stats', cmd_stats, 'co-occurrence tables, conditional entropies and granularity')
    source = sub.add_mutually_exclusive_group(required=True)
    source.add_argument('--scenes', help='directory written by synth-gen')
    source.add_argument('--table', help='co-occurrence CSV')
    sub.add_argument('--hierarchy', help='place hierarchy JSON (default: built-in)')
    sub.add_argument('--alpha', type=float, default=0.0, help='additive smoothing')

    sub = command('gradcheck', cmd_gradcheck, 'finite-difference check of every op and a micro network')
    sub.add_argument('--epsilon', type=float, default=1e-5)
    sub.add_argument('--op-tolerance', type=float, default=1e-5)
    sub.add_argument('--tolerance', type=float, default=1e-4)

    sub = command('oracle', cmd_oracle, 'exact Bayes-oracle accuracies of a world')
    sub.add_argument('--world')
    sub.add_argument('--hierarchy')
    sub.set_defaults(out=None)

    sub = command('experiment', cmd_experiment, 'run a named experiment')
    sub.add_argument('name', choices=EXPERIMENTS)
    sub.add_argument('--repeats', type=int)
    sub.add_argument('--no-assertions', action='store_true',
                     help='skip the statistical acceptance checks on trained accuracies')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level={0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG),
                        format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr)
    try:
        return args.handler(args)
    except Exception as error:
        code = exit_code(error)
        if code is None:
            raise
        print(f'matcontext {args.command}: {error}', file=sys.stderr)
        return code
