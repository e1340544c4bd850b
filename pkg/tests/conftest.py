"""Shared miniature experiment bundles. Training is real but tiny; the
paired bundle runs at 64px desk profile because the adversarial arms need
features the discriminator can actually separate (see test_runner)."""

import pytest

from segadapt.config import config_from_dict
from segadapt.runner import run_matrix, run_paired

TINY_SCHEDULE = {"divisor": 1, "stage1_epochs": 3, "stage1_milestones": [2],
                 "stage2_warmup_epochs": 2, "stage2_joint_epochs": 2,
                 "stage3_epochs": 2, "stage3_milestones": []}


def tiny_raw(out, **over):
    raw = {
        "output_dir": str(out),
        "seeds": [0, 1],
        "methods": ["no_adaptation", "tc"],
        "benchmark": {"clinics": ["A", "B"], "n_subjects": 8,
                      "image_size": 32, "seed": 1},
        "schedule": dict(TINY_SCHEDULE),
        "segmenter": {"profile": "tiny"},
        "matrix": {"pairs": [["A", "B"]]},
    }
    raw.update(over)
    return raw


def paired_raw(out):
    # undertrained features barely separate the domains, so stage 1 keeps its
    # full rate throughout and both acquisitions sit on the dark-extreme side
    return {
        "output_dir": str(out),
        "seeds": [0],
        "benchmark": {"clinics": ["A", "B"], "n_subjects": 20,
                      "image_size": 64, "seed": 1},
        "schedule": {"divisor": 1, "stage1_epochs": 20,
                     "stage1_milestones": [], "stage2_warmup_epochs": 8,
                     "stage2_joint_epochs": 3, "stage3_epochs": 2,
                     "stage3_milestones": [], "fooled_delta": 0.10},
        "paired": {"source": "A", "clinic_a": "extreme",
                   "clinic_b": {"name": "extreme", "noise_sigma": 0.02,
                                "blur_width": 0.9},
                   "n_subjects": 8, "seed": 1},
    }


@pytest.fixture(scope="session")
def matrix_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    config = config_from_dict(tiny_raw(out))
    return config, run_matrix(config)


@pytest.fixture(scope="session")
def paired_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("paired")
    config = config_from_dict(paired_raw(out))
    return config, run_paired(config)
