# aogdet/cli.py
"""
Command-line driver for the full pipeline:

    synth -> group -> train -> combine -> detect -> eval   (+ visualize)

Every subcommand accepts `--config <file>` (flat `key = value`) and
`--log-level`. Runtime failures print one diagnostic line to stderr and exit
with status 1; usage errors exit with status 2.
"""

import argparse
import csv
import logging
import os
import sys

from aogdet import __version__, configure_logging
from aogdet.config import Config
from aogdet.errors import AogError, IoError

logger = logging.getLogger(__name__)


# --- 1. Helpers ---

def _load_config(args):
    config = Config.from_file(args.config) if args.config else Config()
    config.override(seed=getattr(args, 'seed', None))
    config.validate_critical_config()
    return config


def _model_paths(paths):
    for path in paths:
        if not os.path.isfile(path):
            raise IoError(f"model not found: {path}", path=path)
    return paths


def format_metrics(metrics):
    """Aligned text table: one AP row per class, then mAP and top-1."""
    width = max([len('class')] + [len(name) for name in metrics['ap']])
    lines = [f"{'class':<{width}}  {'AP':>6}"]
    for name, value in metrics['ap'].items():
        lines.append(f"{name:<{width}}  {value:>6.3f}")
    lines.append(f"{'mAP':<{width}}  {metrics['map']:>6.3f}")
    lines.append(f"{'top-1':<{width}}  {metrics['top1']:>6.3f}")
    return '\n'.join(lines)


def write_metrics_csv(path, metrics):
    try:
        with open(path, 'w', encoding='utf-8', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(['metric', 'class', 'value'])
            for name, value in metrics['ap'].items():
                writer.writerow(['ap', name, f"{value:.6f}"])
            writer.writerow(['map', '', f"{metrics['map']:.6f}"])
            writer.writerow(['top1', '', f"{metrics['top1']:.6f}"])
    except OSError as e:
        raise IoError(f"Cannot write CSV {path}: {e}", path=path)


# --- 2. Subcommands ---

def cmd_synth(args, config):
    from aogdet.services.synthetic import generate_synthetic_corpus
    corpus = generate_synthetic_corpus(args.out, config.synth())
    print(f"train manifest: {corpus.train_path}")
    print(f"test manifest:  {corpus.test_path}")


def cmd_group(args, config):
    from aogdet.services.datasets import build_training_samples, load_manifest
    from aogdet.services.grouping import group_classes, write_groups
    manifest = load_manifest(args.manifest)
    samples = build_training_samples(manifest, args.classes)
    groups, similarity = group_classes(samples, config.dso(), classes=args.classes or manifest.classes(),
                                       sigma=args.sigma, seed_iterations=config.SEED_ITERATIONS)
    write_groups(args.out, groups)
    for group in groups:
        print(' '.join(group))


def cmd_train(args, config):
    from aogdet.services.datasets import build_training_samples, load_manifest
    from aogdet.services.dso import train_group
    from aogdet.services.grouping import read_groups
    from aogdet.services.serialization import save_model
    manifest = load_manifest(args.manifest)
    groups = read_groups(args.groups) if args.groups else [[name] for name in manifest.classes()]
    samples = build_training_samples(manifest)
    dso_config = config.dso()
    for index, group in enumerate(groups):
        checkpoints = os.path.join(args.out_dir, f'group_{index:02d}_iters') if args.checkpoints else None
        graph = train_group(samples, dso_config, classes=group, checkpoint_dir=checkpoints)
        path = os.path.join(args.out_dir, f'group_{index:02d}.aogm')
        save_model(path, graph)
        print(f"{path}: {' '.join(group)} (m={graph.m}, n={graph.n}, shared={graph.shared_leaf_count()})")


def cmd_combine(args, config):
    from aogdet.services.combine import apply_reweighting, merge_models, train_combination
    from aogdet.services.datasets import build_combined_images, load_manifest
    from aogdet.services.serialization import load_model, save_model
    graph = merge_models([load_model(path) for path in _model_paths(args.models)])
    if not args.merge_only:
        images = build_combined_images(load_manifest(args.manifest))
        params = train_combination(graph, images, config.combine())
        apply_reweighting(graph, params)
    save_model(args.out, graph)
    print(f"{args.out}: m={graph.m}, n={graph.n}, classes {' '.join(graph.class_names())}")


def _detection_inputs(args):
    from aogdet.services.datasets import load_manifest
    if args.manifest:
        manifest = load_manifest(args.manifest)
        return [(entry.path, manifest.resolve(entry)) for entry in manifest.entries]
    return [(path, path) for path in args.images]


def cmd_detect(args, config):
    from aogdet.services.datasets import latent_record, write_detections, write_latent_sidecar
    from aogdet.services.imaging import load_image
    from aogdet.services.inference import detect_multiclass
    from aogdet.services.serialization import load_model
    graph = load_model(_model_paths([args.model])[0])
    detection_config = config.detection()
    results, records = {}, []
    for image_id, path in _detection_inputs(args):
        detections = detect_multiclass(graph, load_image(path), detection_config)
        results[image_id] = detections
        records.extend(latent_record(image_id, d, graph) for d in detections)
        logger.debug(f"{image_id}: {len(detections)} detections")
    write_detections(args.out, results)
    if args.latent_sidecar:
        write_latent_sidecar(args.latent_sidecar, records)
    print(f"{sum(len(d) for d in results.values())} detections on {len(results)} images -> {args.out}")


def cmd_eval(args, config):
    from aogdet.services.datasets import load_manifest, read_detections
    from aogdet.services.evaluation import evaluate_detections
    manifest = load_manifest(args.manifest, check_files=False)
    metrics = evaluate_detections(read_detections(args.detections), manifest.groundtruth(),
                                  method='11_point' if args.eleven_point else 'all_points')
    print(format_metrics(metrics))
    if args.csv:
        write_metrics_csv(args.csv, metrics)


def cmd_visualize(args, config):
    from aogdet.services.imaging import render_hog_glyphs, save_image
    from aogdet.services.serialization import load_model
    graph = load_model(_model_paths([args.model])[0])
    os.makedirs(args.out_dir, exist_ok=True)
    bins = config.ORIENTATION_BINS
    for node in graph.and_nodes:
        save_image(os.path.join(args.out_dir, f'and_{node.id:03d}_{node.class_name}_v{node.view}.pgm'),
                   render_hog_glyphs(node.weights, node.root_shape, bins))
    for leaf in graph.leaves:
        save_image(os.path.join(args.out_dir, f'leaf_{leaf.handle:03d}_slot{leaf.part_slot}.pgm'),
                   render_hog_glyphs(leaf.weights, leaf.shape, bins))
    print(f"{graph.m} and-node and {graph.n} leaf glyphs -> {args.out_dir}")


# --- 3. Parser ---

def build_parser():
    parser = argparse.ArgumentParser(prog='aogdet', description="And-Or graph multiclass object detector")
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="Flat 'key = value' config file")
    common.add_argument('--log-level', default=None, choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help="Generate a synthetic corpus")
    p.add_argument('--out', required=True, help="Output directory")
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('group', parents=[common], help="Group classes by part similarity")
    p.add_argument('--manifest', required=True)
    p.add_argument('--out', required=True, help="Groups file to write")
    p.add_argument('--classes', nargs='+')
    p.add_argument('--sigma', type=float, help="Similarity threshold (default M/3)")
    p.set_defaults(handler=cmd_group)

    p = sub.add_parser('train', parents=[common], help="Train one model per class group")
    p.add_argument('--manifest', required=True)
    p.add_argument('--groups', help="Groups file (default: one group per class)")
    p.add_argument('--out-dir', required=True)
    p.add_argument('--checkpoints', action='store_true', help="Keep a model per improving iteration")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('combine', parents=[common], help="Merge group models and learn the reweighting")
    p.add_argument('--models', nargs='+', required=True)
    p.add_argument('--manifest', help="Training manifest for the reweighting")
    p.add_argument('--out', required=True)
    p.add_argument('--merge-only', action='store_true', help="Skip reweighting (beta = 1, no edges)")
    p.set_defaults(handler=cmd_combine)

    p = sub.add_parser('detect', parents=[common], help="Run the detector on images")
    p.add_argument('--model', required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--manifest')
    source.add_argument('--images', nargs='+')
    p.add_argument('--out', required=True, help="Detections file to write")
    p.add_argument('--latent-sidecar', help="JSON-lines file with each detection's latent assignment")
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser('eval', parents=[common], help="Score a detections file against a manifest")
    p.add_argument('--detections', required=True)
    p.add_argument('--manifest', required=True)
    p.add_argument('--csv', help="Also write the metrics as CSV")
    p.add_argument('--eleven-point', action='store_true', help="11-point interpolated AP")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('visualize', parents=[common], help="Render learned filters as glyph images")
    p.add_argument('--model', required=True)
    p.add_argument('--out-dir', required=True)
    p.set_defaults(handler=cmd_visualize)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    if args.command == 'combine' and not args.merge_only and not args.manifest:
        parser.print_usage(sys.stderr)
        print("aogdet combine: error: --manifest is required unless --merge-only", file=sys.stderr)
        return 2

    try:
        config = _load_config(args)
        configure_logging(args.log_level or config.LOG_LEVEL)
        args.handler(args, config)
        return 0
    except (AogError, OSError) as e:
        message = e.message if isinstance(e, AogError) else str(e)
        print(f"aogdet {args.command}: {message.strip()}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
