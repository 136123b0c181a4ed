import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, apply_overrides, default_output_root, load_config
from .datapipe import generate_corpus, images_only, load_corpus, write_corpus
from .driver import ablation_grid, evaluate, predict, sweep, train
from .errors import NodsegError
from .gradcheck import CHECK_NAMES, GradientChecker
from .labelgen import LABEL_MODES, LabelGenerator, write_bundles
from .overlay import OverlayRenderer
from .reporter import ReportGenerator
from .tinynet import Checkpoint, TinySegNet
from .utils import setup_logging

logger = logging.getLogger("nodseg.cli")

# flag -> config key for the training-style subcommands
RUN_FLAGS = {
    "corpus": "corpus", "epochs": "epochs", "batch_size": "batch_size", "lr": "lr",
    "label_mode": "label_mode", "loss_mode": "loss_mode", "seed": "seed",
    "workers": "workers", "output_dir": "output_dir", "topo_form": "topo_form",
}


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(v.strip()) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values, got {text!r}")
    return parse


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument('--config', '-c', help='Run config file (.json or .toml)')
    p.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                   help='Override any config field, e.g. weights.lambda=0.5 or synth.n_train=40 (repeatable)')
    p.add_argument('--corpus', help='Corpus directory (default: generate the synthetic corpus)')
    p.add_argument('--epochs', type=int)
    p.add_argument('--batch-size', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--label-mode', choices=LABEL_MODES)
    p.add_argument('--loss-mode', choices=('P', 'A', 'B', 'C', 'D', 'E'))
    p.add_argument('--topo-form', choices=('bce', 'literal'))
    p.add_argument('--seed', type=int)
    p.add_argument('--workers', type=int, help='Concurrent threads (default: 4)')
    p.add_argument('--output-dir', help='Output root (default: $NODSEG_OUTPUT_ROOT or runs/)')


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then explicit flags, then --set overrides."""
    cfg = load_config(args.config) if getattr(args, 'config', None) else RunConfig()
    overrides = [f"{key}={json.dumps(getattr(args, flag))}" for flag, key in RUN_FLAGS.items()
                 if getattr(args, flag, None) is not None]
    return apply_overrides(cfg, overrides + list(getattr(args, 'overrides', [])))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nodseg",
        description="Weakly supervised nodule segmentation from four-point annotations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  nodseg gen-data --out data/synth
  nodseg gen-labels --corpus data/synth --mode H
  nodseg gradcheck
  nodseg train --corpus data/synth --loss-mode E --label-mode H
  nodseg ablate --corpus data/synth --modes P3,A3,E3 --seeds 0,1,2
        """
    )
    parser.add_argument('--verbose', '-v', action='store_true', help='Debug logging and full tracebacks')
    parser.add_argument('--no-rich', action='store_true', help='Disable rich output formatting')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', help='Generate a synthetic corpus directory')
    p.add_argument('--config', '-c', help='Run config file; its [synth] section is used')
    p.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE')
    p.add_argument('--workers', type=int)
    p.add_argument('--out', '-o', help='Corpus directory (default: <output root>/corpus)')

    p = sub.add_parser('gen-labels', help='Build label bundles and report pseudo-label precision')
    p.add_argument('--corpus', required=True)
    p.add_argument('--mode', choices=LABEL_MODES, default='H')
    p.add_argument('--split', choices=('train', 'test', 'all'), default='all')
    p.add_argument('--workers', type=int, default=8)
    p.add_argument('--out', '-o', help='Write bundle masks to this directory')
    p.add_argument('--save', help='Save the precision table as JSON')

    p = sub.add_parser('gradcheck', help='Verify analytic gradients by central finite differences')
    p.add_argument('--only', type=_csv(str), help=f'Comma-separated subset of {",".join(CHECK_NAMES)}')
    p.add_argument('--instances', type=int, default=10)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--step', type=float, default=1e-5)

    p = sub.add_parser('train', help='Train one configuration')
    _add_run_options(p)

    p = sub.add_parser('eval', help='Evaluate a checkpoint on a corpus split (no prompts used)')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--corpus', required=True)
    p.add_argument('--split', choices=('train', 'test', 'all'), default='test')
    p.add_argument('--threshold', type=float, default=0.5)
    p.add_argument('--workers', type=int, default=4)
    p.add_argument('--out', '-o', help='Write metrics.csv and metrics.json here')

    p = sub.add_parser('ablate', help='Train and score a grid of loss/label modes')
    _add_run_options(p)
    p.add_argument('--modes', type=_csv(str), default=['P3', 'A3', 'E3'], help='e.g. P3,A3,E3 (default)')
    p.add_argument('--seeds', type=_csv(int), default=[0])
    p.add_argument('--out', '-o', help='Ablation CSV path')

    p = sub.add_parser('sweep', help='Score a range of lambda or beta values')
    _add_run_options(p)
    p.add_argument('--param', choices=('lambda', 'beta'), required=True)
    p.add_argument('--values', type=_csv(float), required=True)
    p.add_argument('--seeds', type=_csv(int), default=[0])
    p.add_argument('--out', '-o', help='Sweep CSV path')

    p = sub.add_parser('render', help='Write TP/FN/FP overlays of a checkpoint on a corpus split')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--corpus', required=True)
    p.add_argument('--split', choices=('train', 'test', 'all'), default='test')
    p.add_argument('--limit', type=int, help='Render at most this many images')
    p.add_argument('--out', '-o', default='overlays')
    p.add_argument('--features', action='store_true',
                   help='Also write correlation heatmaps (r_f, r_b, m_c, feature norm, m) per image')
    return parser


def cmd_gen_data(args, reporter: ReportGenerator) -> int:
    cfg = apply_overrides(load_config(args.config) if args.config else RunConfig(), args.overrides)
    corpus = generate_corpus(cfg.synth, workers=args.workers or cfg.workers)
    out = write_corpus(corpus, args.out or Path(default_output_root()) / "corpus")
    reporter.message(f"Corpus written to {out} ({len(corpus.train)} train / {len(corpus.test)} test)")
    return 0


def cmd_gen_labels(args, reporter: ReportGenerator) -> int:
    samples = load_corpus(args.corpus).split(args.split)
    results = LabelGenerator(args.mode, args.workers).run(samples)
    reporter.display_precision(results['precision'], mode=args.mode)
    reporter.display_errors(results['errors'], title="Samples without labels")
    if args.out:
        count = write_bundles(results['records'], args.out)
        reporter.message(f"{count} label bundles written to {args.out}")
    if args.save:
        Path(args.save).write_text(json.dumps({'mode': args.mode, 'precision': results['precision']}, indent=2))
        reporter.message(f"Precision table saved to {args.save}")
    return 0


def cmd_gradcheck(args, reporter: ReportGenerator) -> int:
    checker = GradientChecker(seed=args.seed, instances=args.instances, h=args.step)
    results = checker.run(args.only)
    reporter.display_gradcheck(results)
    return 0 if results['passed'] else 1


def cmd_train(args, reporter: ReportGenerator) -> int:
    cfg = build_run_config(args)
    checkpoint, history = train(cfg, use_rich=reporter.use_rich)
    reporter.display_training(history, checkpoint)
    return 0


def cmd_eval(args, reporter: ReportGenerator) -> int:
    samples = load_corpus(args.corpus).split(args.split)
    images, gts, ids = images_only(samples)
    report = evaluate(args.checkpoint, images, gts, ids=ids, threshold=args.threshold, workers=args.workers)
    reporter.display_metrics(report, title=f"Metrics on {args.split} split")
    if args.out:
        paths = report.save(args.out)
        reporter.message(f"Report saved to {paths['csv']} and {paths['json']}")
    return 0


def cmd_ablate(args, reporter: ReportGenerator) -> int:
    cfg = build_run_config(args)
    rows = ablation_grid(cfg, args.modes, seeds=args.seeds, out_path=args.out, use_rich=reporter.use_rich)
    reporter.display_ablation(rows, title="Ablation (test split)")
    return 0


def cmd_sweep(args, reporter: ReportGenerator) -> int:
    cfg = build_run_config(args)
    rows = sweep(cfg, args.param, args.values, seeds=args.seeds, out_path=args.out, use_rich=reporter.use_rich)
    reporter.display_ablation(rows, key="value", title=f"{args.param} sweep (test split)")
    return 0


def cmd_render(args, reporter: ReportGenerator) -> int:
    samples = load_corpus(args.corpus).split(args.split)[:args.limit]
    images, gts, ids = images_only(samples)
    params = Checkpoint.load(args.checkpoint).params
    preds = predict(params, images)
    renderer = OverlayRenderer(args.out)
    for image, pred, gt, image_id in zip(images, preds, gts, ids):
        renderer.render(image, pred, gt, image_id)
    if args.features:
        net = TinySegNet(params=params)
        for image, image_id in zip(images, ids):
            F, m = net.forward(image)
            renderer.render_features(image, F, m, image_id)
    kinds = "overlays and feature panels" if args.features else "overlays"
    reporter.message(f"{len(images)} {kinds} written to {args.out}")
    return 0


COMMANDS = {
    'gen-data': cmd_gen_data,
    'gen-labels': cmd_gen_labels,
    'gradcheck': cmd_gradcheck,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'sweep': cmd_sweep,
    'render': cmd_render,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point."""
    args = build_parser().parse_args(argv)
    setup_logging(verbose=args.verbose, use_rich=not args.no_rich)
    reporter = ReportGenerator(use_rich=not args.no_rich)

    try:
        return COMMANDS[args.command](args, reporter)
    except KeyboardInterrupt:
        reporter.message("\nInterrupted by user", style="yellow")
        return 1
    except NodsegError as e:
        if args.verbose:
            raise
        reporter.message(f"Error: {e}", style="bold red")
        return 1


if __name__ == "__main__":
    sys.exit(main())
