import json

import pytest
import torch

from nextscale_seg.ablation import build_variant
from nextscale_seg.config import AblationConfig, dump_config, parse_config
from nextscale_seg.data_synth import generate_dataset


def tiny_config_dict():
    return {
        "dataset": {"image_size": 32, "annotators": 2, "train": 4, "val": 2, "test": 2, "seed": 0},
        "model": {"codebook_size": 16, "code_dim": 4, "latent_size": 4, "num_scales": 3, "ae_hidden": 8,
                  "image_feature_dim": 8, "svd_rank": 2, "adapter_hidden": 16, "width": 16, "depth": 2, "heads": 2},
        "stage1": {"stage": 1, "epochs": 1, "batch_size": 4, "max_steps": 2},
        "stage2": {"stage": 2, "epochs": 1, "batch_size": 2, "max_steps": 2, "weight_decay": 0.05},
        "sampling": {"n": 4, "seed": 0},
        "metrics": {"sample_counts": [1, 2, 4], "annotators": 2},
    }


@pytest.fixture
def tiny_config():
    return parse_config(tiny_config_dict())


@pytest.fixture
def tiny_models(tiny_config):
    # Double precision for gradient and equivalence checks.
    return build_variant(AblationConfig(), tiny_config, dtype=torch.float64).eval()


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(dump_config(tiny_config)))
    return path


@pytest.fixture
def tiny_dataset(tmp_path, tiny_config):
    out = tmp_path / "data"
    generate_dataset(tiny_config.dataset, out)
    return out
