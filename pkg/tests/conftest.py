"""Session-scoped artifacts for the acceptance suite.

The heavyweight fixtures here (dataset, trained flow network, extracted
fields, jointly trained classifiers) are built once per session and only
when an acceptance test first asks for them; unit-test files never
trigger them.
"""

import os
import time

import pytest
import torch

torch.set_num_threads(1)

from dftn.config import make_config
from dftn.data import ClipDataset
from dftn.synthetic import DatasetSpec, generate_dataset
from dftn.training import (
    evaluate_branch,
    evaluate_two_stream,
    extract_flows_to,
    finetune_flow_encoder,
    load_dfn,
    load_two_stream,
    train_dfn,
    train_two_stream,
)

ACCEPT_SEEDS = (0, 1, 2)
ACCEPT_DFN_EPOCHS = 12
ACCEPT_JOINT_EPOCHS = 16
ACCEPT_TRAIN_PER_CLASS = 20
ACCEPT_CROP = 72


def acceptance_config(**overrides):
    base = dict(
        crop_size=ACCEPT_CROP,
        epochs_dfn=ACCEPT_DFN_EPOCHS,
        epochs_joint=ACCEPT_JOINT_EPOCHS,
        epochs_finetune=1,
        batch_clips=8,
        batch_pairs=32,
        augment=False,
        lambda_init=1.0,
        seed=0,
    )
    base.update(overrides)
    return make_config("desk", **base)


@pytest.fixture(scope="session")
def accept_root(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("accept_data"))
    generate_dataset(root, DatasetSpec())
    return root


@pytest.fixture(scope="session")
def dfn_run(accept_root, tmp_path_factory):
    cfg = acceptance_config()
    train = ClipDataset(accept_root, "train", crop_size=cfg.crop_size)
    val = ClipDataset(accept_root, "val", crop_size=cfg.crop_size)
    out = str(tmp_path_factory.mktemp("accept_dfn"))
    t0 = time.time()
    summary = train_dfn(cfg, train, val, out)
    duration = time.time() - t0
    return {
        "cfg": cfg,
        "out": out,
        "best_ckpt": os.path.join(out, "best.ckpt"),
        "summary": summary,
        "seconds": duration,
    }


@pytest.fixture(scope="session")
def accept_flow_root(accept_root, dfn_run, tmp_path_factory):
    froot = str(tmp_path_factory.mktemp("accept_flows"))
    model = load_dfn(dfn_run["cfg"], dfn_run["best_ckpt"])
    for split in ("train", "val", "test"):
        ds = ClipDataset(accept_root, split, crop_size=ACCEPT_CROP)
        extract_flows_to(model, ds, froot)
    return froot


def _joint_datasets(root, froot, cfg):
    # Center crops only: at this data scale the +/-24 px crop jitter makes
    # every epoch a fresh view and stalls both branches at chance.
    train = ClipDataset(root, "train", flow_root=froot,
                        crop_size=cfg.crop_size).subset(ACCEPT_TRAIN_PER_CLASS)
    val = ClipDataset(root, "val", flow_root=froot, crop_size=cfg.crop_size)
    test = ClipDataset(root, "test", flow_root=froot, crop_size=cfg.crop_size)
    return train, val, test


ALL_STRATEGIES = ("mul_prob", "avg_prob", "avg_fc", "add_res4")


@pytest.fixture(scope="session")
def joint_runs(accept_root, accept_flow_root, tmp_path_factory):
    """Trained two-stream runs: 3 seeds x {none, bikd} plus one g2d and one
    d2g run, each with test-split scores of its best checkpoint."""
    base = tmp_path_factory.mktemp("accept_joint")
    runs = {}
    jobs = [(seed, mode) for seed in ACCEPT_SEEDS for mode in ("none", "bikd")]
    jobs += [(0, "g2d"), (0, "d2g")]
    for seed, mode in jobs:
        cfg = acceptance_config(seed=seed, distill_mode=mode)
        train, val, test = _joint_datasets(accept_root, accept_flow_root, cfg)
        out = str(base / f"{mode}_s{seed}")
        summary = train_two_stream(cfg, train, val, out)
        model, state = load_two_stream(os.path.join(out, "best.ckpt"))
        scores = evaluate_two_stream(model, test, strategies=ALL_STRATEGIES)
        runs[(seed, mode)] = {
            "cfg": cfg,
            "out": out,
            "summary": summary,
            "test_scores": scores,
            "stored_best_val": state["best"],
        }
    return runs


@pytest.fixture(scope="session")
def finetune_runs(accept_root, accept_flow_root, dfn_run, joint_runs,
                  tmp_path_factory):
    """Per-seed flow-branch accuracy before and after encoder fine-tuning."""
    base = tmp_path_factory.mktemp("accept_ft")
    results = {}
    for seed in ACCEPT_SEEDS:
        cfg = acceptance_config(seed=seed)
        model, _ = load_two_stream(
            os.path.join(joint_runs[(seed, "none")]["out"], "best.ckpt"))
        branch = model.flow
        test_stored = ClipDataset(accept_root, "test", flow_root=accept_flow_root,
                                  crop_size=cfg.crop_size)
        acc_before = evaluate_branch(branch, test_stored)

        dfn = load_dfn(cfg, dfn_run["best_ckpt"])
        train = ClipDataset(accept_root, "train",
                            crop_size=cfg.crop_size).subset(ACCEPT_TRAIN_PER_CLASS)
        val = ClipDataset(accept_root, "val", crop_size=cfg.crop_size)
        finetune_flow_encoder(cfg, dfn, branch, train, val, str(base / f"s{seed}"))

        ft_flow_root = str(base / f"flows_s{seed}")
        test_plain = ClipDataset(accept_root, "test", crop_size=cfg.crop_size)
        extract_flows_to(dfn, test_plain, ft_flow_root)
        test_ft = ClipDataset(accept_root, "test", flow_root=ft_flow_root,
                              crop_size=cfg.crop_size)
        acc_after = evaluate_branch(branch, test_ft)
        results[seed] = {"before": acc_before, "after": acc_after}
    return results
