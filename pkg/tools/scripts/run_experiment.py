#!/usr/bin/env python3
"""
End-to-end Detector Experiment on a Synthetic Corpus

Generates a corpus, groups the classes, trains one model per group, combines
them and reports AP / mAP / top-1 on the test split. With --ablation every
group is trained twice (part sharing on and off) and the leaf counts, the
per-iteration checkpoint AP and the leaf growth over class prefixes are
printed side by side.

Usage:
    python tools/scripts/run_experiment.py --out runs/exp1
    python tools/scripts/run_experiment.py --out runs/exp1 --config small.cfg --seed 3 --ablation

Exit Codes:
    0 - Experiment finished
    1 - Configuration, data or training error
"""

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

# Add project root to Python path
project_root = Path(__file__).resolve().parent.parent.parent
sys.path.insert(0, str(project_root))

from aogdet import configure_logging
from aogdet.config import Config
from aogdet.errors import AogError
from aogdet.services.combine import apply_reweighting, merge_models, train_combination
from aogdet.services.datasets import build_combined_images, build_training_samples, load_manifest
from aogdet.services.dso import run_dso
from aogdet.services.evaluation import evaluate_detections
from aogdet.services.grouping import group_classes, write_groups
from aogdet.services.imaging import load_image
from aogdet.services.inference import detect_multiclass
from aogdet.services.serialization import load_model, save_model
from aogdet.services.synthetic import generate_synthetic_corpus


def banner(title):
    print(f"\n{'='*60}")
    print(title)
    print(f"{'='*60}\n")


def evaluate_model(graph, manifest, detection_config, classes=None):
    """
    Runs the detector over a test manifest and scores it.

    Args:
        graph: Model to evaluate
        manifest: Test DatasetManifest
        detection_config: DetectionConfig for detect_multiclass
        classes: Restrict ground truth to these classes (None keeps all)

    Returns:
        dict: Metrics as returned by evaluate_detections
    """
    detections, groundtruth = {}, {}
    for entry in manifest.entries:
        found = detect_multiclass(graph, load_image(manifest.resolve(entry)), detection_config)
        detections[entry.path] = [(d.class_name, d.score, d.box) for d in found]
        groundtruth[entry.path] = [(label, box) for label, box in entry.annotations
                                   if classes is None or label in classes]
    return evaluate_detections(detections, groundtruth)


def train_variant(samples, groups, config, out_dir, enable_sharing):
    """
    Trains every group with sharing switched on or off.

    Returns:
        List[Tuple[List[str], DsoState, str]]: group, final state, checkpoint dir
    """
    dso_config = _with_sharing(config.dso(), enable_sharing)
    tag = 'shared' if enable_sharing else 'separate'
    trained = []
    for index, group in enumerate(groups):
        checkpoints = os.path.join(out_dir, tag, f'group_{index:02d}_iters')
        os.makedirs(checkpoints, exist_ok=True)
        state = run_dso(samples, dso_config, classes=group, checkpoint_dir=checkpoints)
        save_model(os.path.join(out_dir, tag, f'group_{index:02d}.aogm'), state.graph)
        print(f"  [{tag}] {' '.join(group)}: n={state.graph.n}, shared={state.graph.shared_leaf_count()}, "
              f"iterations={state.iteration}")
        trained.append((group, state, checkpoints))
    return trained


def _with_sharing(dso_config, enable_sharing):
    return replace(dso_config, enable_sharing=enable_sharing)


def combine_variant(trained, train_manifest, config):
    graph = merge_models([state.graph for _, state, _ in trained])
    params = train_combination(graph, build_combined_images(train_manifest), config.combine())
    return apply_reweighting(graph, params)


def checkpoint_curve(trained, test_manifest, detection_config):
    """Prints AP per saved iteration of every group."""
    for group, state, directory in trained:
        names = sorted(name for name in os.listdir(directory) if name.endswith('.aogm'))
        print(f"  {' '.join(group)}:")
        for name in names:
            metrics = evaluate_model(load_model(os.path.join(directory, name)), test_manifest,
                                     detection_config, classes=set(group))
            print(f"    {name}  mAP {metrics['map']:.3f}")


def leaf_growth(samples, classes, config):
    """Leaf count of a single model trained on growing class prefixes, sharing on and off."""
    rows = []
    for k in range(1, len(classes) + 1):
        prefix = classes[:k]
        counts = []
        for enable_sharing in (True, False):
            state = run_dso(samples, _with_sharing(config.dso(), enable_sharing), classes=prefix)
            counts.append(state.graph.n)
        rows.append((k, counts[0], counts[1]))
        print(f"  {k} classes: n_shared_on={counts[0]}  n_shared_off={counts[1]}")
    return rows


def run_experiment(out_dir, config, ablation=False):
    """
    Runs the pipeline and prints a summary.

    Args:
        out_dir: Working directory for corpus, groups and models
        config: Loaded Config
        ablation: Also train and report the non-sharing variant

    Returns:
        dict: Metrics per variant ('shared', optionally 'separate')
    """
    banner("Synthetic corpus")
    corpus = generate_synthetic_corpus(os.path.join(out_dir, 'corpus'), config.synth())
    train_manifest = load_manifest(corpus.train_path)
    test_manifest = load_manifest(corpus.test_path)
    samples = build_training_samples(train_manifest)
    classes = train_manifest.classes()
    print(f"  {len(train_manifest.entries)} train / {len(test_manifest.entries)} test images, "
          f"classes: {' '.join(classes)}")

    banner("Class grouping")
    groups, _ = group_classes(samples, config.dso(), classes=classes, seed_iterations=config.SEED_ITERATIONS)
    write_groups(os.path.join(out_dir, 'groups.txt'), groups)
    for group in groups:
        print(f"  {' '.join(group)}")

    variants = [True, False] if ablation else [True]
    detection_config = config.detection()
    results, trained_by_variant = {}, {}
    for enable_sharing in variants:
        tag = 'shared' if enable_sharing else 'separate'
        banner(f"Training ({tag} parts)")
        trained = train_variant(samples, groups, config, out_dir, enable_sharing)
        final = combine_variant(trained, train_manifest, config)
        save_model(os.path.join(out_dir, f'final_{tag}.aogm'), final)
        metrics = evaluate_model(final, test_manifest, detection_config)
        metrics['n_leaves'] = final.n
        results[tag] = metrics
        trained_by_variant[tag] = trained

    if ablation:
        banner("Per-iteration checkpoint AP")
        for tag, trained in trained_by_variant.items():
            print(f"[{tag}]")
            checkpoint_curve(trained, test_manifest, detection_config)
        banner("Leaf growth over class prefixes")
        leaf_growth(samples, classes, config)

    banner("Experiment Summary")
    for tag, metrics in results.items():
        print(f"[{tag}] leaves={metrics['n_leaves']}  mAP={metrics['map']:.3f}  top-1={metrics['top1']:.3f}")
        for name, value in metrics['ap'].items():
            print(f"    {name:<10} AP {value:.3f}")
    return results


def main():
    parser = argparse.ArgumentParser(description="Run the end-to-end synthetic detector experiment")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--config", help="Flat 'key = value' config file")
    parser.add_argument("--seed", type=int, help="Corpus and training seed")
    parser.add_argument("--ablation", action="store_true",
                        help="Also train without part sharing and report the comparison")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    args = parser.parse_args()

    try:
        config = Config.from_file(args.config) if args.config else Config()
        config.override(seed=args.seed)
        config.validate_critical_config()
        configure_logging(args.log_level)
        os.makedirs(args.out, exist_ok=True)
        run_experiment(args.out, config, ablation=args.ablation)
    except (AogError, OSError) as e:
        message = e.message if isinstance(e, AogError) else str(e)
        print(f"{'='*60}", file=sys.stderr)
        print("✗ EXPERIMENT FAILED", file=sys.stderr)
        print(f"{'='*60}\n", file=sys.stderr)
        print(message, file=sys.stderr)
        sys.exit(1)

    print("✓ Experiment finished.\n")
    sys.exit(0)


if __name__ == "__main__":
    main()
