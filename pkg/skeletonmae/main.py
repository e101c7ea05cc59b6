"""
SkeletonMAE - Command-line entry point
Pre-training, fine-tuning, evaluation, reconstruction, embedding export and experiment grids
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch

from skeletonmae.config import config
from skeletonmae.pipeline.analysis import embed_dataset, reconstruct_dataset
from skeletonmae.pipeline.data import SkeletonDataset, SynthSpec, TEST, generate_synthetic, load_jsonl, pretraining_frames
from skeletonmae.pipeline.errors import ConfigError, OutputWriteError, SkeletonMAEError
from skeletonmae.pipeline.experiments import compare_masking, compare_variants
from skeletonmae.pipeline.masking import MaskSpec
from skeletonmae.pipeline.numerics import seed_everything
from skeletonmae.pipeline.run_config import RunConfig, SynthConfig, load_run_config
from skeletonmae.pipeline.skeleton import build_coco17_layout
from skeletonmae.pipeline.skeleton_mae import MaeModel, SkeletonMAETrainer, load_mae_model
from skeletonmae.pipeline.strl import SSLFinetuner, SslModel, evaluate, load_ssl_model

logger = logging.getLogger(__name__)


def setup_logging() -> None:
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def write_json(path: Path, payload: Dict[str, Any]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise OutputWriteError(path, e) from None
    return path


def resolve_run(args: argparse.Namespace) -> Tuple[RunConfig, Path]:
    """Load --config, apply the --seed override and pick the output directory."""
    run = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        run = run.model_copy(update={"seed": args.seed})
    out_dir = Path(getattr(args, "out", None) or run.output_dir or config.OUTPUT_DIR)
    return run, out_dir


def load_splits(run: RunConfig, out_dir: Path, need_test: bool = True) -> Tuple[SkeletonDataset, Optional[SkeletonDataset]]:
    """Train/test datasets from the config paths, or a synthetic set generated into out_dir/data."""
    train_path, test_path = run.data.train_path, run.data.test_path
    if train_path is None and run.experiment.synthetic is not None:
        synth: SynthConfig = run.experiment.synthetic
        spec = SynthSpec(**synth.model_dump(exclude={"active_regions"}),
                         active_regions=tuple(synth.active_regions) if synth.active_regions else None,
                         seed=run.seed)
        train_path, test_path = generate_synthetic(spec, out_dir / "data")
    if train_path is None:
        raise ConfigError("Config names no training data (data.train_path or experiment.synthetic)")

    frames = run.model.frames
    _, train = load_jsonl(train_path, class_count=run.data.class_count, frames=frames)
    test = None
    if test_path is not None:
        _, test = load_jsonl(test_path, split=TEST, class_count=train.class_count, frames=frames)
    elif need_test:
        raise ConfigError("Config names no test data (data.test_path)")
    return train, test


# Commands

def cmd_pretrain(args: argparse.Namespace) -> int:
    run, out_dir = resolve_run(args)
    train, _ = load_splits(run, out_dir, need_test=False)
    generator = seed_everything(run.seed)
    model = MaeModel.from_config(run.model, generator=generator)
    trainer = SkeletonMAETrainer(model, build_coco17_layout(), run.pretrain, run.mask.to_spec(run.seed),
                                 seed=run.seed, run_snapshot=run.snapshot())
    if args.resume:
        trainer.resume(args.resume)

    report = trainer.pretrain(pretraining_frames(train), out_dir=out_dir)
    payload = report.to_dict()
    payload["mask"] = run.mask.label
    payload["seed"] = run.seed
    payload["sequence_cache"] = train.cache.get_statistics()
    write_json(out_dir / "pretrain_report.json", payload)
    logger.info(f"Pre-training finished: {len(report.epoch_losses)} epochs, checkpoint {report.checkpoint_path}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    run, out_dir = resolve_run(args)
    train, test = load_splits(run, out_dir)
    generator = seed_everything(run.seed)
    model = SslModel.from_config(run.model, train.class_count, generator=generator)
    finetuner = SSLFinetuner(model, run.finetune, seed=run.seed, run_snapshot=run.snapshot())
    if args.pretrained:
        finetuner.load_pretrained(args.pretrained)

    report = finetuner.finetune(train, test, out_dir=out_dir)
    payload = report.to_dict()
    payload["top1"] = report.test["top1"]
    payload["mean_top1"] = report.test["mean_top1"]
    payload["seed"] = run.seed
    payload["sequence_cache"] = {"train": train.cache.get_statistics(), "test": test.cache.get_statistics()}
    write_json(out_dir / "finetune_report.json", payload)
    logger.info(f"Fine-tuning finished: test top1={payload['top1']:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_ssl_model(args.model)
    _, dataset = load_jsonl(args.data, split=TEST, class_count=model.class_count, frames=model.frames)
    result = evaluate(model, dataset)
    print(json.dumps(result.to_dict(), sort_keys=True))
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    model, model_config = load_mae_model(args.model)
    _, dataset = load_jsonl(args.data, frames=model_config.frames)
    mask = MaskSpec.parse(args.mask, rng_seed=args.seed)
    indices = range(min(args.limit, len(dataset))) if args.limit else None
    out_path = Path(args.out) / "reconstruction.jsonl"
    reconstruct_dataset(model, dataset, mask, out_path, indices=indices)
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    model, model_config = load_mae_model(args.model)
    _, dataset = load_jsonl(args.data, frames=model_config.frames)
    embed_dataset(model, dataset, Path(args.out), pca_components=args.pca)
    return 0


def _seeds(run: RunConfig, count: int) -> List[int]:
    if count < 1:
        raise ConfigError(f"--seeds must be >= 1, got {count}")
    return [run.seed + k for k in range(count)]


def cmd_compare_masking(args: argparse.Namespace) -> int:
    run, out_dir = resolve_run(args)
    strategies = [m.to_spec() for m in run.experiment.strategies]
    if args.mask:
        strategies = [MaskSpec.parse(text) for text in args.mask]
    if not strategies:
        raise ConfigError("compare-masking needs experiment.strategies in the config or --mask options")
    train, test = load_splits(run, out_dir)
    compare_masking(run, train, test, strategies, _seeds(run, args.seeds), out_dir=out_dir)
    return 0


def cmd_compare_variants(args: argparse.Namespace) -> int:
    run, out_dir = resolve_run(args)
    train, test = load_splits(run, out_dir)
    compare_variants(run, train, test, _seeds(run, args.seeds), out_dir=out_dir)
    return 0


def cmd_generate_synthetic(args: argparse.Namespace) -> int:
    synth = SynthConfig()
    if args.config:
        run = load_run_config(args.config)
        synth = run.experiment.synthetic or synth
    spec = SynthSpec(
        class_count=args.classes if args.classes is not None else synth.class_count,
        sequences_per_class=args.per_class if args.per_class is not None else synth.sequences_per_class,
        frame_count=args.frames if args.frames is not None else synth.frame_count,
        noise_sigma=synth.noise_sigma,
        active_regions=tuple(synth.active_regions) if synth.active_regions else None,
        amplitude=synth.amplitude,
        distinct_regions=synth.distinct_regions,
        seed=args.seed if args.seed is not None else 0,
    )
    generate_synthetic(spec, Path(args.out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skeletonmae", description="Skeleton masked autoencoder pipeline")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("pretrain", help="pre-train the masked graph autoencoder")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint written at an epoch boundary")
    p.set_defaults(handler=cmd_pretrain)

    p = commands.add_parser("finetune", help="fine-tune the sequence classifier")
    p.add_argument("--config", required=True)
    p.add_argument("--pretrained", help="pre-training checkpoint whose encoder initializes every SM block")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_finetune)

    p = commands.add_parser("eval", help="evaluate a fine-tuned model and print JSON metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("reconstruct", help="export masked reconstructions per frame")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mask", required=True, help="body_parts[:r,r,...] or random:RATIO")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, help="only the first LIMIT sequences")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_reconstruct)

    p = commands.add_parser("embed", help="export pooled encoder features")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pca", type=int, help="add a PCA projection with this many components")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_embed)

    p = commands.add_parser("compare-masking", help="masking strategy grid")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--mask", action="append", help="strategy override, repeatable")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_compare_masking)

    p = commands.add_parser("compare-variants", help="backbone / depth / initialization ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_compare_variants)

    p = commands.add_parser("generate-synthetic", help="write a synthetic train/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_generate_synthetic)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    torch.set_num_threads(config.NUM_THREADS)
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except SkeletonMAEError as e:
        logger.error(f"{args.command} failed ({type(e).__name__}): {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
