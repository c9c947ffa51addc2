"""
InclusionSentinel Main Entry Point

Command line front end for dataset simulation, training, evaluation and the experiment pipeline.

Usage:
    python main.py simulate presence --count 100 --out data/presence
    python main.py ingest records.csv --task radii --out data/measured
    python main.py train --dataset data/presence --model svm --out models/presence
    python main.py eval --model-file models/presence/model.json --dataset data/presence --test-only
    python main.py experiment radii --scale 0.25 --seed 0
    python main.py sweep measurements --seed 0
    python main.py sweep electrodes --scale 0.1
"""

import argparse
import json
import sys
from pathlib import Path

from inclusions.dataset import generate_dataset, ingest_nd_records, read_dataset, split, write_dataset
from inclusions.forward import PATTERN_KINDS
from inclusions.phantom import TASKS
from inclusions.pipeline import (
    MODEL_KINDS, SEED_STRIDE, SPLIT_POLICY, SWEEP_ELECTRODES, SWEEP_MEASUREMENTS, TASK_PLANS, check_isolation,
    evaluate_saved, run_electrode_sweep, run_measurement_sweep, run_task, save_model, train_model,
)
from inclusions.shared import error_payload, load_config, validate_environment, write_json


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='InclusionSentinel EIT inclusion classification toolkit')
    parser.add_argument('--config', help='JSON file with configuration overrides')
    sub = parser.add_subparsers(dest='command', required=True)

    simulate = sub.add_parser('simulate', help='Simulate a labeled D-N dataset')
    simulate.add_argument('task', choices=sorted(TASKS))
    simulate.add_argument('--count', type=int, required=True, help='Samples per class')
    simulate.add_argument('--electrodes', type=int, default=16)
    simulate.add_argument('--measurements', type=int, default=16)
    simulate.add_argument('--pattern', choices=PATTERN_KINDS, default='trig')
    simulate.add_argument('--seed', type=int, default=0)
    simulate.add_argument('--out', required=True)

    ingest = sub.add_parser('ingest', help='Convert measured N-D records into a dataset')
    ingest.add_argument('path')
    ingest.add_argument('--task', choices=sorted(TASKS), default='radii')
    ingest.add_argument('--electrodes', type=int, default=None)
    ingest.add_argument('--out', required=True)

    train = sub.add_parser('train', help='Train a classifier on a saved dataset')
    train.add_argument('--dataset', required=True)
    train.add_argument('--model', choices=MODEL_KINDS, required=True)
    train.add_argument('--seed', type=int, default=0)
    train.add_argument('--out', required=True)

    evaluate = sub.add_parser('eval', help='Score a saved model on a saved dataset')
    evaluate.add_argument('--model-file', required=True)
    evaluate.add_argument('--dataset', required=True)
    evaluate.add_argument('--test-only', action='store_true', help='Score only the held-out test split')
    evaluate.add_argument('--seed', type=int, default=0)
    evaluate.add_argument('--out', default=None)

    experiment = sub.add_parser('experiment', help='Run one classification experiment end to end')
    experiment.add_argument('task', choices=sorted(TASK_PLANS))
    experiment.add_argument('--scale', type=float, default=None)
    experiment.add_argument('--seed', type=int, default=0)
    experiment.add_argument('--model', choices=MODEL_KINDS, default=None)
    experiment.add_argument('--dataset', default=None, help='Use a saved dataset instead of simulating')
    experiment.add_argument('--out', default=None)

    sweep = sub.add_parser('sweep', help='Radii accuracy against measurement or electrode count')
    sweep.add_argument('kind', choices=['measurements', 'electrodes'])
    sweep.add_argument('--values', type=int, nargs='+', default=None)
    sweep.add_argument('--scale', type=float, default=0.25)
    sweep.add_argument('--seed', type=int, default=0)
    sweep.add_argument('--out', default=None)
    return parser


def run_command(args, config) -> None:
    if args.command == 'simulate':
        dataset = generate_dataset(
            args.task, args.count, electrode_count=args.electrodes, measurement_count=args.measurements,
            pattern=args.pattern, base_seed=args.seed * SEED_STRIDE, noise_scale=config['noise_scale'],
            tank_radius=config['tank_radius'], mesh_max_edge=config['mesh_max_edge'],
            flux_method=config['flux_method'], refine_inclusions=config['refine_inclusions'],
            workers=config['workers'],
        )
        write_dataset(dataset, args.out)
        print(f"✓ Wrote {len(dataset)} samples to {args.out}")

    elif args.command == 'ingest':
        dataset = ingest_nd_records(args.path, task=args.task, electrode_count=args.electrodes)
        write_dataset(dataset, args.out)
        for diagnostic in dataset.diagnostics:
            print(f"  ✗ Line {diagnostic.get('line_number')}: {diagnostic.get('message')}")
        print(f"✓ Ingested {len(dataset)} records into {args.out}")

    elif args.command == 'train':
        dataset = read_dataset(args.dataset)
        parts = split(dataset, SPLIT_POLICY[args.model], seed=args.seed)
        check_isolation(parts)
        model, validation, info = train_model(dataset, args.model, parts, args.seed, config['workers'])
        out = Path(args.out)
        save_model(model, out / 'model.json')
        summary = {"model_kind": args.model, "dataset": args.dataset, "seed": args.seed, "training": info}
        if validation is not None:
            summary["validation"] = validation.to_dict()
            print(f"✓ Validation accuracy {100 * validation.accuracy:.1f}%")
        write_json(out / 'training.json', summary)
        print(f"✓ Saved {args.model.upper()} model to {out / 'model.json'}")

    elif args.command == 'eval':
        evaluate_saved(args.model_file, args.dataset, test_only=args.test_only, seed=args.seed, out=args.out)

    elif args.command == 'experiment':
        report = run_task(args.task, scale=args.scale, seed=args.seed, model=args.model, out=args.out,
                          config=config, dataset_dir=args.dataset)
        print(f"✓ {args.task}: test accuracy {100 * report.test_accuracy:.1f}%")

    elif args.command == 'sweep':
        if args.kind == 'measurements':
            run_measurement_sweep(args.values or SWEEP_MEASUREMENTS, seed=args.seed, scale=args.scale,
                                  out=args.out, config=config)
        else:
            run_electrode_sweep(args.values or SWEEP_ELECTRODES, seed=args.seed, scale=args.scale,
                                out=args.out, config=config)


def main(argv=None) -> int:
    """Main entry point for InclusionSentinel."""
    args = build_parser().parse_args(argv)

    print("\n" + "="*80)
    print("INCLUSIONSENTINEL - EIT Inclusion Classification")
    print("="*80 + "\n")

    print("Validating environment configuration...")
    if not validate_environment():
        print("\n✗ Environment is invalid. Fix the EIT_* variables in your .env file and try again.")
        return 1
    print("✓ Environment validated\n")

    try:
        config = load_config(args.config)
        run_command(args, config)
    except Exception as e:
        print(f"\n✗ {args.command} failed: {e}")
        print(json.dumps(error_payload(e), indent=2))
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
