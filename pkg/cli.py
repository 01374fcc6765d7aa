import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd
import psutil

from config import EXIT_CODES, LABEL_COLUMN, LOG_FILE, LOG_LEVEL, OUT_DIR, ConfigError, ScenarioConfig, \
    load_scenario_config
from esom_detector import (
    DetectorError,
    classify_frame,
    compute_umatrix,
    evaluate,
    load_model,
    read_dataset,
    save_model,
    train_model,
    umatrix_frame,
    write_dataset,
)
from key_tree import dump_tree
from manet_sim import SimulationError, initial_group, run_scenario, synthetic_feature_frame
from security_suite import run_attack_suite, suite_passed
from utils import ensure_dir, format_rate, format_verdict_table, write_metrics

logger = logging.getLogger(__name__)

INPUT_ERRORS = (ConfigError, DetectorError, SimulationError, FileNotFoundError)


def setup_logging(level=LOG_LEVEL):
    handlers = [logging.StreamHandler()]
    if LOG_FILE:
        handlers.append(logging.FileHandler(LOG_FILE))
    logging.basicConfig(
        format='%(asctime)s - %(levelname)s - %(message)s',
        level=getattr(logging, str(level).upper(), logging.INFO),
        handlers=handlers,
    )


def _config(args):
    return load_scenario_config(args.config) if args.config else ScenarioConfig()


def _seed(args, required=True):
    if args.seed is None and required:
        raise ConfigError(f"{args.command}: --seed is required")
    return 0 if args.seed is None else args.seed


def cmd_simulate(args):
    config = _config(args)
    seed = _seed(args)
    cells = len(config.pause_times) * len(config.dropper_counts)
    logger.info(f"Simulating {cells} cell(s), {config.node_count} nodes, seed {seed}")
    report = run_scenario(config, seed)
    metrics_path, trace_path = report.write(args.out)
    print(f"metrics: {metrics_path}")
    print(f"trace: {trace_path}")
    return EXIT_CODES['OK']


def cmd_attack_suite(args):
    config = _config(args)
    seed = _seed(args, required=False)
    if args.weaken_replay:
        logger.warning("Replay check disabled: this run is a negative control")
    verdicts = run_attack_suite(config, seed, replay_check=not args.weaken_replay)
    print(format_verdict_table(verdicts))
    if args.out:
        ensure_dir(args.out)
        rows = [(v.goal, 'PASS' if v.passed else 'FAIL', v.trials, v.failures, v.detail) for v in verdicts]
        write_metrics(rows, os.path.join(args.out, 'verdicts.csv'),
                      ['goal', 'result', 'trials', 'failures', 'detail'])
    return EXIT_CODES['OK'] if suite_passed(verdicts) else EXIT_CODES['SUITE_FAILURE']


def cmd_synthesize(args):
    seed = _seed(args)
    rng = np.random.default_rng(seed)
    ensure_dir(args.out)
    paths = []
    for name, count in (('train.csv', args.train), ('test.csv', args.test)):
        path = os.path.join(args.out, name)
        write_dataset(synthetic_feature_frame(count, args.separation, rng), path)
        paths.append(path)
    for path in paths:
        print(f"dataset: {path}")
    return EXIT_CODES['OK']


def cmd_train(args):
    config = _config(args)
    seed = _seed(args)
    frame = read_dataset(args.data)
    model = train_model(frame, config.som, rng=np.random.default_rng(seed))

    ensure_dir(args.out)
    model_path = os.path.join(args.out, 'model.esom')
    save_model(model, model_path)
    heights_path = os.path.join(args.out, 'uheights.csv')
    umatrix = compute_umatrix(model.grid)
    umatrix_frame(model.grid, umatrix, model.labeling).to_csv(heights_path, index=False, float_format='%.9g')
    print(f"model: {model_path}")
    print(f"uheights: {heights_path}")
    return EXIT_CODES['OK']


def cmd_classify(args):
    if not os.path.isfile(args.model):
        raise FileNotFoundError(f"{args.model}: model file not found")
    model = load_model(args.model)
    frame = read_dataset(args.data, labeled=False)
    verdicts = classify_frame(model, frame)

    ensure_dir(args.out)
    path = os.path.join(args.out, 'verdicts.csv')
    verdicts.to_csv(path, index_label='row', float_format='%.9g')
    counts = verdicts['verdict'].value_counts().to_dict()
    logger.info(f"Classified {len(verdicts)} samples: {counts}")
    print(f"verdicts: {path}")
    return EXIT_CODES['OK']


def cmd_evaluate(args):
    if not os.path.isfile(args.verdicts):
        raise FileNotFoundError(f"{args.verdicts}: verdict file not found")
    verdicts = pd.read_csv(args.verdicts)
    if 'verdict' not in verdicts.columns:
        raise DetectorError(f"{args.verdicts}: missing column verdict")
    truth = read_dataset(args.data)
    rates = evaluate(verdicts['verdict'], truth[LABEL_COLUMN], count_unclassified=args.count_unclassified)

    ensure_dir(args.out)
    path = os.path.join(args.out, 'evaluation.csv')
    write_metrics([rates], path, list(rates))
    print(f"detection rate: {format_rate(rates['detection_rate'])}")
    print(f"false alarm rate: {format_rate(rates['false_alarm_rate'])}")
    print(f"unclassified: {rates['unclassified']}")
    return EXIT_CODES['OK']


def cmd_dump_tree(args):
    config = _config(args)
    seed = _seed(args, required=False)
    _, session = initial_group(config, seed)
    text = dump_tree(session.tree)
    if args.out:
        ensure_dir(args.out)
        path = os.path.join(args.out, 'tree.csv')
        with open(path, 'w', encoding='utf-8') as handle:
            handle.write(text)
        print(f"tree: {path}")
    else:
        sys.stdout.write(text)
    return EXIT_CODES['OK']


def build_parser():
    parser = argparse.ArgumentParser(prog='manet-ids', description="MANET intrusion detection and response")
    parser.add_argument('--log-level', default=LOG_LEVEL)
    sub = parser.add_subparsers(dest='command', required=True)

    def command(name, handler, help_text, out_default=OUT_DIR, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument('--config', help="scenario file (KEY=VALUE)")
        p.add_argument('--seed', type=int)
        p.add_argument('--out', default=out_default)
        p.set_defaults(handler=handler)
        return p

    command('simulate', cmd_simulate, "run the scenario sweep and write metrics.csv and trace.csv")
    p = command('attack-suite', cmd_attack_suite, "run the adversary oracles", out_default=None)
    p.add_argument('--weaken-replay', action='store_true', help=argparse.SUPPRESS)

    p = command('synthesize', cmd_synthesize, "write synthetic two-class train and test datasets", config=False)
    p.add_argument('--separation', type=float, default=4.0, help="class separation in feature spreads")
    p.add_argument('--train', type=int, default=2000)
    p.add_argument('--test', type=int, default=1000)

    p = command('train', cmd_train, "train a detector model on a labeled dataset")
    p.add_argument('--data', required=True)

    p = command('classify', cmd_classify, "classify a dataset with a trained model", config=False)
    p.add_argument('--model', required=True)
    p.add_argument('--data', required=True)

    p = command('evaluate', cmd_evaluate, "detection and false-alarm rates of a verdict file", config=False)
    p.add_argument('--verdicts', required=True)
    p.add_argument('--data', required=True, help="labeled dataset the verdicts were made on")
    p.add_argument('--count-unclassified', action='store_true')

    command('dump-tree', cmd_dump_tree, "print the key tree founded at t=0", out_default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    try:
        code = args.handler(args)
    except INPUT_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_CODES['INPUT_ERROR']

    memory = psutil.Process().memory_info().rss / (1024 * 1024)
    logger.info(f"{args.command} finished with exit code {code}, resident memory {memory:.1f} MiB")
    return code


if __name__ == '__main__':
    sys.exit(main())
