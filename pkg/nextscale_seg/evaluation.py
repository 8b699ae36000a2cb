import json
import logging
import math

import numpy as np
import plotly
import torch

from more_itertools import chunked, ncycles, take
from tqdm import tqdm

from .consensus import aggregate, sample_masks
from .data_synth import iter_records
from .errors import ConfigurationError, InvalidInputError
from .metrics import dice_scores, score_case, summarize

logger = logging.getLogger(__name__)


def plotly_jsonify(data):
    return json.loads(json.dumps(data, cls=plotly.utils.PlotlyJSONEncoder))


def oracle_samples(annotations, n):
    """n predictions copied from the annotations, cycling through them in order."""
    return take(n, ncycles(list(annotations), math.ceil(n / len(annotations))))


@torch.no_grad()
def reconstruction_by_scale(autoencoder, records, batch_size=64):
    """Reconstruction Dice of every annotator mask when decoding only the first k scales, for k = 1..K."""
    masks = torch.cat([r.masks.reshape(-1, *r.masks.shape[-2:]) for r in records])
    if masks.shape[0] == 0:
        raise InvalidInputError("no masks to reconstruct")
    scores = {k: [] for k in range(1, autoencoder.schedule.K + 1)}
    for rows in chunked(range(masks.shape[0]), batch_size):
        batch = masks[rows[0]:rows[-1] + 1]
        pyramid = autoencoder.quantize_pyramid(autoencoder.encode(batch))
        for k, m_hat in enumerate(autoencoder.partial_dequantize(pyramid), start=1):
            recon = autoencoder.decode(m_hat)[:, 0] >= 0.5
            scores[k].append(dice_scores(recon.cpu().numpy(), batch.cpu().numpy()))
    return {k: float(np.concatenate(v).mean()) for k, v in scores.items()}


def evaluate_dataset(data_dir, config, models=None, split="test", oracle=False, recon=False, progress=False):
    """
    Score sampled segmentations of a split against its annotators.
    :param data_dir: dataset directory
    :param config: RunConfig (sampling and metric protocol)
    :param models: VariantModels; may be None with oracle=True
    :param oracle: use copies of the annotations instead of model samples
    :param recon: add per-scale reconstruction Dice of the autoencoder
    :return: MetricReport
    """
    if models is None and (not oracle or recon):
        raise InvalidInputError("evaluation needs trained models unless run as an oracle")
    records = list(iter_records(data_dir, split=split))
    if not records:
        raise InvalidInputError("split '{}' has no cases".format(split))
    sc = config.sampling
    num_classes = records[0].num_classes
    if records[0].annotators != config.metrics.annotators:
        raise ConfigurationError("metrics.annotators is {} but the dataset has {} annotators per case".format(
            config.metrics.annotators, records[0].annotators))
    case_scores = []
    for record in tqdm(records, desc="evaluate", disable=not progress):
        for c in range(num_classes):
            annotations = [m.numpy() for m in record.masks[:, c]]
            consensus = None
            if oracle:
                samples = oracle_samples(annotations, sc.n)
            else:
                drawn = sample_masks(record.image, c, models, n=sc.n, temperature=sc.temperature, base_seed=sc.seed,
                                     top_k=sc.top_k)
                samples = list(drawn.binary().cpu().numpy())
                consensus = aggregate(drawn)[1].cpu().numpy()
            case_scores.append((c, score_case(samples, annotations, config.metrics.sample_counts, consensus)))
    report = summarize(case_scores, num_classes=num_classes)
    report.extras.update(split=split, cases=len(records), samples=sc.n, oracle=oracle)
    if models is not None:
        report.extras.update(variant=models.name, parameters=models.parameter_counts(),
                             token_budget=models.token_budget())
    if recon:
        report.extras["recon_dice"] = {str(k): v for k, v in reconstruction_by_scale(models.autoencoder, records).items()}
    logger.info("evaluated %d cases of split %s: dice %.4f, hm-iou %.4f", len(records), split, report.dice, report.hm_iou)
    return report


def write_report(path, report):
    with open(path, "w") as f:
        json.dump(plotly_jsonify(report.to_dict()), f, indent=2, sort_keys=True)
