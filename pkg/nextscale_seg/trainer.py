import copy
import csv
import hashlib
import logging
import math

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from more_itertools import chunked
from tqdm import tqdm

from .checkpoint import load_checkpoint, save_checkpoint
from .codebook import quantization_loss, straight_through
from .config import dump_config
from .errors import ConfigurationError, DivergenceError
from .metrics import bce_loss, dice_loss, dice_scores
from .segmentor import sequence_nll
from .store import PyramidStore
from .viz import curve_figure

logger = logging.getLogger(__name__)

CURVE_HEADER = ("step", "split", "metric", "value")


# region Seeding and schedules


def derive_seed(seed, stream):
    """Independent 31-bit seed for a named RNG stream (e.g. "init", "shuffle:3", "sampling")."""
    digest = hashlib.md5("{}:{}".format(seed, stream).encode()).hexdigest()
    return int(digest[:8], 16) & 0x7FFFFFFF


def _generator(seed, stream):
    return torch.Generator().manual_seed(derive_seed(seed, stream))


def cosine_factor(step, total_steps):
    """Learning-rate multiplier: 1 at step 0, 0 at total_steps."""
    if total_steps <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def make_optimizer(parameters, train_config):
    return torch.optim.AdamW(parameters, lr=train_config.lr, betas=tuple(train_config.betas),
                             weight_decay=train_config.weight_decay)


def make_scheduler(optimizer, train_config, total_steps):
    if train_config.schedule == "constant":
        return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: 1.0)
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: cosine_factor(step, total_steps))


def _total_steps(train_config, num_items):
    per_epoch = math.ceil(num_items / train_config.batch_size)
    total = per_epoch * train_config.epochs
    return min(total, train_config.max_steps) if train_config.max_steps else total


# endregion

# region Curves


@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    curve: List[tuple] = field(default_factory=list)
    best: float = math.nan
    steps: int = 0

    def values(self, split, metric):
        return [value for _, s, m, value in self.curve if s == split and m == metric]


def write_curve(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CURVE_HEADER)
        for step, split, metric, value in rows:
            writer.writerow([step, split, metric, repr(float(value))])


def read_curve(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [(int(r["step"]), r["split"], r["metric"], float(r["value"])) for r in reader]


def _emit_curves(out_dir, rows, title):
    write_curve(out_dir / "curve.csv", rows)
    curve_figure(rows, title=title).write_html(str(out_dir / "curve.html"), include_plotlyjs="cdn")


# endregion

# region Stage 1


def stage1_loss(autoencoder, masks, train_config, pyramid=None):
    """
    quantization constraint + lambda_dice * Dice loss + lambda_bce * BCE loss on one batch of masks.
    :param masks: binary masks [B, H, W]
    :param pyramid: fixed token pyramid (quantized from the current encoder when None)
    :return: dict with total, quant, dice and bce (tensors)
    """
    target = autoencoder.as_mask(masks)
    m = autoencoder.encoder(target)
    if not torch.isfinite(m).all():
        # no nearest code for a non-finite feature
        nan = m.new_full((), math.nan)
        return dict(total=nan, quant=nan, dice=nan, bce=nan)
    if pyramid is None:
        pyramid = autoencoder.quantize_pyramid(m)
    m_hat = autoencoder.dequantize_pyramid(pyramid)
    quant = quantization_loss(m, m_hat, beta=train_config.beta, dim=(1, 2, 3))
    pred = autoencoder.decode(straight_through(m, m_hat))
    dice = dice_loss(pred, target)
    bce = bce_loss(pred, target)
    total = quant + train_config.lambda_dice * dice + train_config.lambda_bce * bce
    return dict(total=total, quant=quant, dice=dice, bce=bce)


def _stage1_masks(dataset, index, annotators):
    # [B, C, H, W] for one annotator per case, flattened to [B * C, H, W]
    masks = dataset.masks[index, annotators]
    return masks.reshape(-1, *masks.shape[-2:])


@torch.no_grad()
def evaluate_autoencoder(autoencoder, dataset, train_config, batch_size=64, scales=None):
    """Mean stage-1 loss and reconstruction Dice over every annotator mask of a split."""
    if len(dataset) == 0:
        return math.nan, math.nan
    masks = dataset.masks.reshape(-1, *dataset.masks.shape[-2:])
    losses, scores = [], []
    for rows in chunked(range(masks.shape[0]), batch_size):
        batch = masks[rows[0]:rows[-1] + 1]
        losses.append(float(stage1_loss(autoencoder, batch, train_config)["total"]) * len(rows))
        recon = autoencoder.reconstruct(batch, scales=scales)[:, 0] >= 0.5
        scores.append(dice_scores(recon.cpu().numpy(), batch.cpu().numpy()))
    return sum(losses) / masks.shape[0], float(np.concatenate(scores).mean())


def _check_finite(loss, step, stage):
    if not torch.isfinite(loss):
        logger.warning("stage %d diverged at step %d (loss=%s)", stage, step, float(loss))
        raise DivergenceError("stage {} loss became non-finite at step {}".format(stage, step))


def _resume_point(ckpt, path):
    """(start epoch, step, best score) of a `last` snapshot."""
    if "epoch" not in ckpt.extra:
        raise ConfigurationError("{} is a final checkpoint; resume from {}".format(path, Path(path) / "last"))
    return ckpt.extra["epoch"] + 1, ckpt.extra["step"], ckpt.extra.get("best")


def train_stage1(config, train_data, autoencoder, val_data=None, out_dir=None, progress=False, resume=None):
    """
    Train the mask autoencoder.
    :param config: RunConfig (uses config.stage1)
    :param train_data: SegmentationDataset of the train split
    :param autoencoder: MaskAutoencoder (trained in place)
    :param val_data: SegmentationDataset used for model selection (train_data when None)
    :param out_dir: checkpoint directory; the best model goes here, the latest state to out_dir/last
    :param resume: stage-1 checkpoint to continue from
    :return: TrainResult
    """
    tc = config.stage1
    val_data = val_data if val_data is not None and len(val_data) else train_data
    if len(train_data) == 0:
        raise ConfigurationError("the train split is empty")
    optimizer = make_optimizer([p for p in autoencoder.parameters() if p.requires_grad], tc)
    total_steps = _total_steps(tc, len(train_data))
    scheduler = make_scheduler(optimizer, tc, total_steps)
    start_epoch, step, rows = 0, 0, []
    best, best_state = -math.inf, None
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_stage=1)
        start_epoch, step, saved_best = _resume_point(ckpt, resume)
        ckpt.restore("autoencoder", autoencoder)
        ckpt.restore_optimizer(optimizer)
        if saved_best is not None and "best_autoencoder" in ckpt.states:
            best, best_state = saved_best, ckpt.states["best_autoencoder"]
        scheduler.last_epoch = step
    A = train_data.annotators
    for epoch in range(start_epoch, tc.epochs):
        if step >= total_steps:
            break
        autoencoder.train()
        order = torch.randperm(len(train_data), generator=_generator(tc.seed, "shuffle:{}".format(epoch)))
        picks = torch.randint(A, (len(train_data),), generator=_generator(tc.seed, "annotator:{}".format(epoch)))
        epoch_losses = []
        batches = list(chunked(order.tolist(), tc.batch_size))
        for index in tqdm(batches, desc="stage1 epoch {}".format(epoch), disable=not progress, leave=False):
            if step >= total_steps:
                break
            masks = _stage1_masks(train_data, index, picks[index])
            losses = stage1_loss(autoencoder, masks, tc)
            _check_finite(losses["total"], step, 1)
            optimizer.zero_grad()
            losses["total"].backward()
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(autoencoder.parameters(), tc.grad_clip)
            optimizer.step()
            scheduler.step()
            step += 1
            value = losses["total"].item()
            epoch_losses.append(value)
            rows.append((step, "train", "loss", value))
        autoencoder.eval()
        val_loss, val_dice = evaluate_autoencoder(autoencoder, val_data, tc)
        rows += [(step, "val", "loss", val_loss), (step, "val", "dice", val_dice)]
        logger.info("stage1 epoch %d/%d step %d: train loss %.5f, val loss %.5f, val dice %.4f, lr %.3g",
                    epoch + 1, tc.epochs, step, float(np.mean(epoch_losses)) if epoch_losses else math.nan,
                    val_loss, val_dice, scheduler.get_last_lr()[0])
        if val_dice > best or best_state is None:
            best, best_state = val_dice, copy.deepcopy(autoencoder.state_dict())
        if out_dir is not None and ((epoch + 1) % tc.checkpoint_every == 0 or epoch + 1 == tc.epochs):
            save_checkpoint(Path(out_dir) / "last", 1, dict(autoencoder=autoencoder, best_autoencoder=best_state),
                            config=dump_config(config), optimizer=optimizer, rng_state=torch.get_rng_state(),
                            extra=dict(epoch=epoch, step=step, best=best))
    if best_state is not None:
        autoencoder.load_state_dict(best_state)
    checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        checkpoint = save_checkpoint(out_dir, 1, dict(autoencoder=autoencoder), config=dump_config(config),
                                     extra=dict(best_val_dice=best, steps=step))
        _emit_curves(out_dir, rows, "stage 1")
    return TrainResult(checkpoint=checkpoint, curve=rows, best=best, steps=step)


# endregion

# region Stage 2


def _stage2_batch(dataset, index, annotators, classes, store):
    keys = [(dataset.case_ids[i], int(j), int(k)) for i, j, k in zip(index, annotators, classes)]
    masks = dataset.masks[index, annotators, classes]
    pyramid = store.pyramids(keys, masks)
    return dataset.images[index], pyramid, torch.as_tensor(classes, dtype=torch.long)


def stage2_loss(image_encoder, segmentor, images, pyramid, class_ids):
    return sequence_nll(pyramid, class_ids, image_encoder(images), segmentor)


@torch.no_grad()
def evaluate_segmentor(image_encoder, segmentor, dataset, store, seed, batch_size=32):
    """Mean NLL over a split with one fixed annotator and class per case."""
    if len(dataset) == 0:
        return math.nan
    annotators = torch.randint(dataset.annotators, (len(dataset),), generator=_generator(seed, "val:annotator"))
    classes = torch.randint(dataset.num_classes, (len(dataset),), generator=_generator(seed, "val:class"))
    total = 0.0
    for index in chunked(range(len(dataset)), batch_size):
        images, pyramid, class_ids = _stage2_batch(dataset, index, annotators[index], classes[index], store)
        total += float(stage2_loss(image_encoder, segmentor, images, pyramid, class_ids)) * len(index)
    return total / len(dataset)


def train_stage2(config, train_data, autoencoder, image_encoder, segmentor, val_data=None, out_dir=None,
                 progress=False, resume=None):
    """
    Train the image encoder and segmentor against token pyramids of the frozen autoencoder. Each case contributes
    one randomly chosen annotator mask (and class) per epoch.
    :return: TrainResult
    """
    if autoencoder is None:
        raise ConfigurationError("stage 2 needs a trained stage-1 autoencoder checkpoint")
    if segmentor.autoencoder is not autoencoder:
        raise ConfigurationError("the segmentor was built on a different autoencoder")
    if len(train_data) == 0:
        raise ConfigurationError("the train split is empty")
    tc = config.stage2
    val_data = val_data if val_data is not None and len(val_data) else train_data
    autoencoder.requires_grad_(False)
    autoencoder.eval()
    store = PyramidStore(autoencoder, tc.cache_dir)
    parameters = [p for p in list(image_encoder.parameters()) + list(segmentor.parameters()) if p.requires_grad]
    optimizer = make_optimizer(parameters, tc)
    total_steps = _total_steps(tc, len(train_data))
    scheduler = make_scheduler(optimizer, tc, total_steps)
    start_epoch, step, rows = 0, 0, []
    best, best_states = math.inf, None
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_stage=2)
        start_epoch, step, saved_best = _resume_point(ckpt, resume)
        ckpt.restore("image_encoder", image_encoder)
        ckpt.restore("segmentor", segmentor)
        ckpt.restore_optimizer(optimizer)
        if saved_best is not None and "best_segmentor" in ckpt.states:
            best = saved_best
            best_states = ckpt.states["best_image_encoder"], ckpt.states["best_segmentor"]
        scheduler.last_epoch = step
    modules = dict(autoencoder=autoencoder, image_encoder=image_encoder, segmentor=segmentor)
    for epoch in range(start_epoch, tc.epochs):
        if step >= total_steps:
            break
        image_encoder.train()
        segmentor.train()
        n = len(train_data)
        order = torch.randperm(n, generator=_generator(tc.seed, "shuffle:{}".format(epoch)))
        annotators = torch.randint(train_data.annotators, (n,), generator=_generator(tc.seed, "annotator:{}".format(epoch)))
        classes = torch.randint(train_data.num_classes, (n,), generator=_generator(tc.seed, "class:{}".format(epoch)))
        epoch_losses = []
        batches = list(chunked(order.tolist(), tc.batch_size))
        for index in tqdm(batches, desc="stage2 epoch {}".format(epoch), disable=not progress, leave=False):
            if step >= total_steps:
                break
            images, pyramid, class_ids = _stage2_batch(train_data, index, annotators[index], classes[index], store)
            loss = stage2_loss(image_encoder, segmentor, images, pyramid, class_ids)
            _check_finite(loss, step, 2)
            optimizer.zero_grad()
            loss.backward()
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(parameters, tc.grad_clip)
            optimizer.step()
            scheduler.step()
            step += 1
            value = loss.item()
            epoch_losses.append(value)
            rows.append((step, "train", "nll", value))
        image_encoder.eval()
        segmentor.eval()
        val_nll = evaluate_segmentor(image_encoder, segmentor, val_data, store, tc.seed)
        rows.append((step, "val", "nll", val_nll))
        logger.info("stage2 epoch %d/%d step %d: train nll %.5f, val nll %.5f, lr %.3g, cache %d/%d hits",
                    epoch + 1, tc.epochs, step, float(np.mean(epoch_losses)) if epoch_losses else math.nan,
                    val_nll, scheduler.get_last_lr()[0], store.hits, store.hits + store.misses)
        if val_nll < best or best_states is None:
            best = val_nll
            best_states = copy.deepcopy(image_encoder.state_dict()), copy.deepcopy(segmentor.state_dict())
        if out_dir is not None and ((epoch + 1) % tc.checkpoint_every == 0 or epoch + 1 == tc.epochs):
            snapshot = dict(modules, best_image_encoder=best_states[0], best_segmentor=best_states[1])
            save_checkpoint(Path(out_dir) / "last", 2, snapshot, config=dump_config(config), optimizer=optimizer,
                            rng_state=torch.get_rng_state(), extra=dict(epoch=epoch, step=step, best=best))
    if best_states is not None:
        image_encoder.load_state_dict(best_states[0])
        segmentor.load_state_dict(best_states[1])
    checkpoint = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        checkpoint = save_checkpoint(out_dir, 2, modules, config=dump_config(config),
                                     extra=dict(best_val_nll=best, steps=step))
        _emit_curves(out_dir, rows, "stage 2")
    return TrainResult(checkpoint=checkpoint, curve=rows, best=best, steps=step)

# endregion
