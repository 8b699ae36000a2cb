import json

import numpy as np
import pytest

from nextscale_seg.config import DatasetSpec
from nextscale_seg.data_synth import (SegmentationDataset, generate_dataset, iter_records, load_dataset, manifest_files,
                                      read_manifest, render_case, signed_distance)
from nextscale_seg.errors import FormatError
from nextscale_seg.metrics import iou


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generation_is_byte_identical(tmp_path, tiny_config):
    generate_dataset(tiny_config.dataset, tmp_path / "a")
    generate_dataset(tiny_config.dataset, tmp_path / "b")
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a.keys() == b.keys()
    assert a == b


def test_manifest_layout(tiny_dataset):
    manifest, root = read_manifest(tiny_dataset)
    assert root == tiny_dataset
    assert [len(manifest["splits"][s]) for s in ("train", "val", "test")] == [4, 2, 2]
    record = manifest["records"][0]
    assert record["image"]["path"] == "cases/case_00000/image.arsg"
    assert [m["path"] for m in record["masks"][1]] == ["cases/case_00000/mask_a1_c0.arsg"]
    assert len(manifest_files(manifest)) == 8 * 3


def test_render_ranges():
    spec = DatasetSpec(image_size=32, annotators=3)
    image, masks, regions = render_case(spec, 0)
    assert image.dtype == np.float32 and image.shape == (1, 32, 32)
    assert image.min() >= 0 and image.max() <= 1
    assert masks.dtype == np.uint8 and masks.shape == (3, 1, 32, 32)
    assert set(np.unique(masks)) <= {0, 1}
    assert regions.any()


def test_zero_jitter_reproduces_region():
    spec = DatasetSpec(image_size=32, annotators=3, boundary_jitter=0.0)
    for index in range(3):
        _, masks, regions = render_case(spec, index)
        for j in range(3):
            assert np.array_equal(masks[j].astype(bool), regions)


def test_agreement_drops_with_jitter():
    means = []
    for jitter in (0.0, 1.5, 3.0):
        spec = DatasetSpec(image_size=32, annotators=2, boundary_jitter=jitter)
        scores = []
        for index in range(30):
            _, masks, _ = render_case(spec, index)
            scores.append(iou(masks[0, 0], masks[1, 0]))
        means.append(np.mean(scores))
    assert means[0] == 1.0
    assert means[0] > means[1] > means[2]


def test_nested_classes():
    spec = DatasetSpec(image_size=32, num_classes=3, annotators=2)
    for index in range(3):
        _, masks, regions = render_case(spec, index)
        assert (regions[1] <= regions[0]).all() and (regions[2] <= regions[1]).all()
        for j in range(2):
            assert (masks[j, 1] <= masks[j, 0]).all() and (masks[j, 2] <= masks[j, 1]).all()


def test_signed_distance():
    region = np.zeros((5, 5), dtype=bool)
    region[2, 2] = True
    d = signed_distance(region)
    assert d[2, 2] == -1.0 and d[2, 3] == 1.0 and d[0, 2] == 2.0
    assert np.isinf(signed_distance(np.zeros((3, 3), bool))).all()


def test_round_trip_matches_render(tiny_dataset, tiny_config):
    for index, (image, masks, cid) in enumerate(load_dataset(tiny_dataset)):
        expected_image, expected_masks, _ = render_case(tiny_config.dataset, index)
        assert cid == "case_{:05d}".format(index)
        assert np.array_equal(image.numpy(), expected_image)
        assert np.array_equal(masks.numpy(), expected_masks)


def test_split_and_shuffle(tiny_dataset):
    assert [r.case_id for r in iter_records(tiny_dataset, split="val")] == ["case_00004", "case_00005"]
    a = [r.case_id for r in iter_records(tiny_dataset, split="train", shuffle_seed=3)]
    b = [r.case_id for r in iter_records(tiny_dataset, split="train", shuffle_seed=3)]
    assert a == b
    assert sorted(a) == ["case_{:05d}".format(i) for i in range(4)]


def test_dataset_tensors(tiny_dataset):
    data = SegmentationDataset(tiny_dataset, split="train")
    assert len(data) == 4
    assert data.images.shape == (4, 1, 32, 32)
    assert data.masks.shape == (4, 2, 1, 32, 32)
    assert (data.annotators, data.num_classes) == (2, 1)
    image, masks = data[1]
    assert image.shape == (1, 32, 32) and masks.shape == (2, 1, 32, 32)


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError, match="missing"):
        read_manifest(tmp_path)


def test_foreign_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(FormatError):
        read_manifest(tmp_path)


def test_missing_file(tiny_dataset):
    (tiny_dataset / "cases" / "case_00001" / "mask_a0_c0.arsg").unlink()
    with pytest.raises(FormatError, match="missing"):
        list(iter_records(tiny_dataset))


def test_corrupt_file(tiny_dataset):
    path = tiny_dataset / "cases" / "case_00000" / "image.arsg"
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="checksum"):
        list(iter_records(tiny_dataset))
    # Checksums can be skipped; the file still decodes.
    assert len(list(iter_records(tiny_dataset, verify=False))) == 8


def test_truncated_file(tiny_dataset):
    path = tiny_dataset / "cases" / "case_00000" / "image.arsg"
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(FormatError):
        list(iter_records(tiny_dataset, verify=False))
