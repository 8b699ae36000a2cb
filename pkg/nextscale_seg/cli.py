import argparse
import json
import logging
import sys

from pathlib import Path

import torch

from . import __version__
from .ablation import build_variant, load_models
from .checkpoint import load_checkpoint
from .config import RunConfig, config_schema, dump_config, load_config, parse_config
from .consensus import aggregate, sample_masks, segment
from .data_synth import SegmentationDataset, generate_dataset
from .errors import SegmentationError
from .evaluation import evaluate_dataset, write_report
from .tensorio import read_tensor, write_tensor
from .trainer import train_stage1, train_stage2
from .viz import save_png, scale_grid, scale_panels

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s:%(lineno)d | %(message)s"


def _config(args, required=False):
    if getattr(args, "config", None):
        return load_config(args.config)
    return RunConfig() if required else None


def _image(path):
    return torch.from_numpy(read_tensor(path)).float()


def _emit(data):
    print(json.dumps(data, sort_keys=True))


# region Commands


def cmd_gen_data(args):
    config = _config(args, required=True)
    manifest = generate_dataset(config.dataset, args.out, progress=args.progress)
    _emit(dict(out=str(args.out), cases=len(manifest["records"])))


def cmd_train_ae(args):
    config = _config(args, required=True)
    models = build_variant(config.ablation, config)
    train = SegmentationDataset(args.data, "train")
    val = SegmentationDataset(args.data, "val")
    result = train_stage1(config, train, models.autoencoder, val_data=val, out_dir=args.out, progress=args.progress,
                          resume=args.resume)
    _emit(dict(checkpoint=str(result.checkpoint), steps=result.steps, best_val_dice=result.best))


def cmd_train_seg(args):
    config = _config(args, required=True)
    models = build_variant(config.ablation, config)
    load_checkpoint(args.ae, expected_stage=1).restore("autoencoder", models.autoencoder)
    train = SegmentationDataset(args.data, "train")
    val = SegmentationDataset(args.data, "val")
    result = train_stage2(config, train, models.autoencoder, models.image_encoder, models.segmentor, val_data=val,
                          out_dir=args.out, progress=args.progress, resume=args.resume)
    _emit(dict(checkpoint=str(result.checkpoint), steps=result.steps, best_val_nll=result.best))


def cmd_segment(args):
    config = _config(args)
    models, checkpoint = load_models(args.ckpt, config)
    sampling = (config or parse_config(checkpoint.config)).sampling
    n = args.n if args.n is not None else sampling.n
    seed = args.seed if args.seed is not None else sampling.seed
    temperature = args.temperature if args.temperature is not None else sampling.temperature
    samples = sample_masks(_image(args.image), args.class_id, models, n=n, temperature=temperature, base_seed=seed,
                           top_k=sampling.top_k)
    soft, binary = aggregate(samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(samples.masks):
        write_tensor(out / "sample_{:02d}.arsg".format(i), mask.float())
        save_png(out / "sample_{:02d}.png".format(i), mask)
    write_tensor(out / "consensus_soft.arsg", soft.float())
    save_png(out / "consensus_soft.png", soft)
    write_tensor(out / "consensus_binary.arsg", binary.to(torch.uint8))
    save_png(out / "consensus_binary.png", binary)
    with open(out / "ledger.json", "w") as f:
        json.dump(dict(class_id=args.class_id, temperature=temperature, samples=samples.ledger()), f, indent=2,
                  sort_keys=True)
    _emit(dict(out=str(out), samples=n))


def cmd_evaluate(args):
    config = _config(args)
    models = None
    if args.ckpt:
        models, checkpoint = load_models(args.ckpt, config)
        config = config if config is not None else parse_config(checkpoint.config)
    config = config if config is not None else RunConfig()
    report = evaluate_dataset(args.data, config, models=models, split=args.split, oracle=args.oracle, recon=args.recon,
                              progress=args.progress)
    write_report(args.out, report)
    _emit(dict(out=str(args.out), dice=report.dice))


def cmd_viz_scales(args):
    models, _ = load_models(args.ckpt, _config(args))
    image = _image(args.image)
    _, pyramid = segment(image, args.class_id, models, seed=args.seed)
    panels = scale_panels(models.autoencoder, pyramid)
    scale_grid(image, panels).save(args.out, format="PNG")
    _emit(dict(out=str(args.out), panels=len(panels) + 1))


def cmd_schema(args):
    text = json.dumps(config_schema() if not args.defaults else dump_config(RunConfig()), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


# endregion

# region Parser


def build_parser():
    parser = argparse.ArgumentParser(prog="nextscale-seg", description="Next-scale autoregressive mask segmentation.")
    parser.add_argument("--version", action="version", version="%(prog)s {}".format(__version__))
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", help="write a synthetic multi-annotator dataset")
    p.add_argument("--config", required=True, help="run config (JSON or YAML)")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--progress", action="store_true", help="show a progress bar")
    p.set_defaults(func=cmd_gen_data)

    p = commands.add_parser("train-ae", help="stage 1: train the multi-scale mask autoencoder")
    p.add_argument("--config", required=True, help="run config (JSON or YAML)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", help="snapshot to continue from (the last/ directory of an earlier run)")
    p.add_argument("--progress", action="store_true", help="show progress bars")
    p.set_defaults(func=cmd_train_ae)

    p = commands.add_parser("train-seg", help="stage 2: train the image encoder and segmentor")
    p.add_argument("--config", required=True, help="run config (JSON or YAML)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ae", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", help="snapshot to continue from (the last/ directory of an earlier run)")
    p.add_argument("--progress", action="store_true", help="show progress bars")
    p.set_defaults(func=cmd_train_seg)

    p = commands.add_parser("segment", help="sample N masks for one image and aggregate them")
    p.add_argument("--config", help="run config; the checkpoint's config is used when omitted")
    p.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    p.add_argument("--image", required=True, help="ARSG image [C, H, W]")
    p.add_argument("--class", dest="class_id", type=int, default=0, help="target class")
    p.add_argument("--n", type=int, help="number of samples (sampling.n)")
    p.add_argument("--seed", type=int, help="base seed; sample i uses seed + i (sampling.seed)")
    p.add_argument("--temperature", type=float, help="sampling temperature (sampling.temperature)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_segment)

    p = commands.add_parser("evaluate", help="write a metric report for one split")
    p.add_argument("--config", help="run config; the checkpoint's config is used when omitted")
    p.add_argument("--ckpt", help="stage-2 checkpoint (optional with --oracle)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--oracle", action="store_true", help="score copies of the annotations instead of samples")
    p.add_argument("--recon", action="store_true", help="add per-scale reconstruction Dice")
    p.add_argument("--progress", action="store_true", help="show a progress bar")
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser("viz-scales", help="render the coarse-to-fine decoding of one sample")
    p.add_argument("--config", help="run config; the checkpoint's config is used when omitted")
    p.add_argument("--ckpt", required=True, help="stage-2 checkpoint")
    p.add_argument("--image", required=True, help="ARSG image [C, H, W]")
    p.add_argument("--class", dest="class_id", type=int, default=0, help="target class")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", required=True, help="PNG path")
    p.set_defaults(func=cmd_viz_scales)

    p = commands.add_parser("schema", help="print the run config JSON schema")
    p.add_argument("--defaults", action="store_true", help="print the default config instead")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_schema)
    return parser


# endregion


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        args.func(args)
    except (SegmentationError, OSError) as ex:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(json.dumps({"error": type(ex).__name__, "message": str(ex)}), file=sys.stderr)
        return 1
    return 0
