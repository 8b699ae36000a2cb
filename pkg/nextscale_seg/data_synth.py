"""
Synthetic multi-annotator segmentation data. Every case holds an image with one or more nested foreground regions
and A annotator masks per class. Each annotator shifts the true boundary by a personal bias plus a smooth noise field,
which emulates inter-rater variability.
"""
import json
import logging
import os

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from more_itertools import flatten
from scipy.ndimage import distance_transform_edt, gaussian_filter
from tqdm import tqdm

from .config import DatasetSpec
from .errors import FormatError
from .tensorio import read_tensor, write_tensor

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "nextscale-seg-dataset"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
# Each nested class region is this much smaller than the one containing it.
_nesting_ratio = 0.64


# region Rendering


def _case_rng(seed, index):
    return np.random.default_rng([seed, index])


def _smooth_field(rng, size, sigma):
    field = gaussian_filter(rng.standard_normal((size, size)), sigma=sigma, mode="wrap")
    std = field.std()
    return field / std if std > 0 else field


def _ellipses(rng, size):
    count = int(rng.integers(1, 3))
    shapes = []
    for _ in range(count):
        cy, cx = rng.uniform(0.35 * size, 0.65 * size, size=2)
        a, b = rng.uniform(0.1 * size, 0.22 * size, size=2)
        shapes.append((cy, cx, a, b, rng.uniform(0, np.pi)))
    return shapes


def _region(shapes, size, scale):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    region = np.zeros((size, size), dtype=bool)
    for cy, cx, a, b, angle in shapes:
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(angle) + dy * np.sin(angle)
        v = -dx * np.sin(angle) + dy * np.cos(angle)
        region |= (u / (a * scale)) ** 2 + (v / (b * scale)) ** 2 <= 1.0
    return region


def signed_distance(region):
    """Negative inside (distance to the outside), positive outside (distance to the region)."""
    if not region.any():
        return np.full(region.shape, np.inf)
    return distance_transform_edt(~region) - distance_transform_edt(region)


def render_case(spec, index):
    """
    Render one case deterministically from (spec.seed, index).
    :return: image float32 [C_img, H, W] in [0, 1]; masks uint8 [A, C, H, W]; true regions bool [C, H, W]
    """
    rng = _case_rng(spec.seed, index)
    H = spec.image_size
    shapes = _ellipses(rng, H)
    regions = np.stack([_region(shapes, H, _nesting_ratio ** c) for c in range(spec.num_classes)])
    distances = np.stack([signed_distance(r) for r in regions])

    # Annotators: the same boundary shift for every class keeps nested regions nested.
    masks = np.zeros((spec.annotators, spec.num_classes, H, H), dtype=np.uint8)
    for j in range(spec.annotators):
        bias = rng.uniform(-1.0, 1.0) * spec.annotator_bias * spec.boundary_jitter
        shift = bias + spec.boundary_jitter * _smooth_field(rng, H, sigma=H / 16)
        masks[j] = (distances <= shift).astype(np.uint8)

    texture = _smooth_field(rng, H, sigma=2.0)
    image = np.zeros((spec.image_channels, H, H), dtype=np.float64)
    for ch in range(spec.image_channels):
        contrast = rng.uniform(0.2, 0.5, size=spec.num_classes)
        layer = 0.3 + 0.08 * texture
        for c in range(spec.num_classes):
            layer = layer + contrast[c] * gaussian_filter(regions[c].astype(np.float64), sigma=1.0)
        image[ch] = layer + spec.texture_noise * rng.standard_normal((H, H))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, masks, regions


# endregion

# region Writing


def case_id(index):
    return "case_{:05d}".format(index)


def _split_of(spec, index):
    if index < spec.train:
        return "train"
    return "val" if index < spec.train + spec.val else "test"


def generate_dataset(spec, out_dir, progress=False):
    """
    Render spec.train + spec.val + spec.test cases into out_dir and write the manifest.
    :param spec: DatasetSpec
    :param out_dir: output directory (created when missing)
    :return: manifest dict
    """
    out_dir = Path(out_dir)
    total = spec.train + spec.val + spec.test
    records = []
    for index in tqdm(range(total), desc="gen-data", disable=not progress):
        image, masks, _ = render_case(spec, index)
        cid = case_id(index)
        case_dir = out_dir / "cases" / cid
        os.makedirs(case_dir, exist_ok=True)
        image_path = "cases/{}/image.arsg".format(cid)
        record = dict(case_id=cid, split=_split_of(spec, index), classes=list(range(spec.num_classes)),
                      image=dict(path=image_path, crc32=write_tensor(out_dir / image_path, image)), masks=[])
        for j in range(spec.annotators):
            row = []
            for k in range(spec.num_classes):
                mask_path = "cases/{}/mask_a{}_c{}.arsg".format(cid, j, k)
                row.append(dict(path=mask_path, crc32=write_tensor(out_dir / mask_path, masks[j, k])))
            record["masks"].append(row)
        records.append(record)
    manifest = dict(format=MANIFEST_FORMAT, version=MANIFEST_VERSION, seed=spec.seed, spec=spec.model_dump(),
                    splits={split: [r["case_id"] for r in records if r["split"] == split] for split in SPLITS},
                    records=records)
    with open(out_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info("wrote %d cases to %s", total, out_dir)
    return manifest


# endregion

# region Loading


@dataclass
class CaseRecord:
    case_id: str
    image: torch.Tensor
    # uint8 [A, C, H, W]
    masks: torch.Tensor

    @property
    def annotators(self):
        return self.masks.shape[0]

    @property
    def num_classes(self):
        return self.masks.shape[1]


def read_manifest(path):
    """
    :param path: dataset directory or manifest file
    :return: (manifest dict, dataset root)
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise FormatError("{}: file is missing".format(path))
    except json.JSONDecodeError as ex:
        raise FormatError("{}: invalid manifest ({})".format(path, ex))
    if not isinstance(manifest, dict) or manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError("{}: not a dataset manifest".format(path))
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError("{}: unsupported manifest version {}".format(path, manifest.get("version")))
    return manifest, path.parent


def dataset_spec(manifest):
    return DatasetSpec.model_validate(manifest["spec"])


def _load_record(root, record, spec, verify):
    def read(entry, shape):
        array = read_tensor(root / entry["path"], entry["crc32"] if verify else None)
        if tuple(array.shape) != shape:
            raise FormatError("{}: expected shape {}, got {}".format(root / entry["path"], list(shape), list(array.shape)))
        return array

    H = spec.image_size
    image = read(record["image"], (spec.image_channels, H, H))
    masks = np.stack([np.stack([read(entry, (H, H)) for entry in row]) for row in record["masks"]])
    if not np.isin(masks, (0, 1)).all():
        raise FormatError("{}: masks of {} are not binary".format(root, record["case_id"]))
    return CaseRecord(case_id=record["case_id"], image=torch.from_numpy(image), masks=torch.from_numpy(masks))


def iter_records(path, split=None, shuffle_seed=None, verify=True):
    """
    Stream the records of a dataset.
    :param path: dataset directory or manifest file
    :param split: "train", "val", "test" or None for all
    :param shuffle_seed: permute the records with this seed (None keeps manifest order)
    :param verify: check every file against its manifest checksum
    :return: generator of CaseRecord
    """
    manifest, root = read_manifest(path)
    spec = dataset_spec(manifest)
    records = [r for r in manifest["records"] if split is None or r["split"] == split]
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
        records = [records[i] for i in order]
    for record in records:
        yield _load_record(root, record, spec, verify)


def load_dataset(path, split=None, shuffle_seed=None, verify=True):
    """Generator of (image, masks [A][C], case id) tuples; see iter_records."""
    for record in iter_records(path, split=split, shuffle_seed=shuffle_seed, verify=verify):
        yield record.image, record.masks, record.case_id


def manifest_files(manifest):
    """Relative paths of every tensor file the manifest lists."""
    return list(flatten([r["image"]["path"]] + [m["path"] for m in flatten(r["masks"])] for r in manifest["records"]))


class SegmentationDataset(torch.utils.data.Dataset):
    """One split held in memory: images [N, C_img, H, W] float32 and masks [N, A, C, H, W] uint8."""

    def __init__(self, path, split="train", verify=True):
        manifest, _ = read_manifest(path)
        self.spec = dataset_spec(manifest)
        records = list(iter_records(path, split=split, verify=verify))
        H = self.spec.image_size
        self.case_ids = [r.case_id for r in records]
        self.images = torch.stack([r.image for r in records]) if records else \
            torch.zeros(0, self.spec.image_channels, H, H)
        self.masks = torch.stack([r.masks for r in records]) if records else \
            torch.zeros(0, self.spec.annotators, self.spec.num_classes, H, H, dtype=torch.uint8)

    def __len__(self):
        return len(self.case_ids)

    def __getitem__(self, index):
        return self.images[index], self.masks[index]

    @property
    def annotators(self):
        return self.masks.shape[1]

    @property
    def num_classes(self):
        return self.masks.shape[2]

# endregion
