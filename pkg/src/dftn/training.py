"""Training loops: self-supervised flow, single branches, and the two-stream model.

Every run writes to an output directory: config.json (the full
configuration plus its hash), metrics.jsonl (one row per evaluation),
and last.ckpt / best.ckpt.  All randomness is derived from
(seed, purpose, epoch) keys, never from global state, so an interrupted
run resumed from last.ckpt replays the remaining epochs bit for bit.

A shared stagnation detector watches the validation metric of each run
(PSNR for flow training, accuracy for classifiers).  When it fires, the
decay policy halves every learning rate, halves the distillation weight
where one is in play, and on its first firing re-couples back-end rates
to a tenth of the front-end (see schedule.py).
"""

import hashlib
import json
import os
import time

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .branches import Branch, TwoStreamModel, pad_flow_sequence
from .checkpoint import load_checkpoint, save_checkpoint
from .data import adjacent_pair_arrays, batched_clip_tensors
from .dfn import DeformationFlowNetwork
from .distill import total_loss
from .errors import DivergenceError
from .fusion import fuse_predictions
from .metrics import accuracy, psnr, ssim
from .schedule import DecayPolicy, StagnationDetector
from .warp import save_fields


def derive_seed(*parts):
    """Stable 63-bit seed from any printable parts."""
    blob = "|".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF


def generator(*parts):
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen


class RunDir:
    """Filesystem layout of one training run."""

    def __init__(self, path):
        self.path = path
        os.makedirs(path, exist_ok=True)

    def file(self, name):
        return os.path.join(self.path, name)

    def write_config(self, cfg, extra=None):
        record = {"config": cfg.to_dict(), "config_hash": cfg.content_hash()}
        if extra:
            record.update(extra)
        with open(self.file("config.json"), "w") as fh:
            json.dump(record, fh, indent=1, sort_keys=True)

    def append_metrics(self, row):
        with open(self.file("metrics.jsonl"), "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    def read_metrics(self):
        path = self.file("metrics.jsonl")
        if not os.path.exists(path):
            return []
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def _check_finite(loss, context):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss in {context}; training aborted")


def _index_batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


# ---------------------------------------------------------------------------
# Flow network


def make_dfn(cfg):
    torch.manual_seed(derive_seed(cfg.seed, "dfn-init"))
    return DeformationFlowNetwork(base_width=cfg.dfn_width)


def evaluate_dfn(model, dataset, max_pairs=200, stride=3):
    """Mean held-out PSNR and SSIM of warped sources against their targets."""
    model.eval()
    ps, ss = [], []
    with torch.no_grad():
        for i in range(len(dataset)):
            frames = torch.from_numpy(dataset.load_frames(i))
            src = frames[:-1:stride].unsqueeze(1)
            tgt = frames[1::stride][: src.shape[0]].unsqueeze(1)
            warped = model.warp_source(src, model(src, tgt))
            for k in range(src.shape[0]):
                ps.append(psnr(tgt[k, 0].numpy(), warped[k, 0].numpy()))
                ss.append(ssim(tgt[k, 0].numpy().astype(np.float64),
                               warped[k, 0].numpy().astype(np.float64)))
                if len(ps) >= max_pairs:
                    return float(np.mean(ps)), float(np.mean(ss))
    return float(np.mean(ps)), float(np.mean(ss))


def train_dfn(cfg, train_ds, val_ds, out_dir, resume=False):
    """Self-supervised flow training; returns a summary dict."""
    run = RunDir(out_dir)
    model = make_dfn(cfg)
    optimizer = torch.optim.Adam(
        [{"params": model.parameters(), "lr": cfg.lr_dfn, "role": "front"}],
        betas=(0.9, 0.999), eps=1e-8,
    )
    detector = StagnationDetector(cfg.patience, cfg.min_delta)
    policy = DecayPolicy()
    start_epoch = 0
    best = -np.inf
    step = 0

    ckpt_path = run.file("last.ckpt")
    if resume and os.path.exists(ckpt_path):
        state = load_checkpoint(ckpt_path)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        detector.load_state_dict(state["detector"])
        policy.load_state_dict(state["policy"])
        start_epoch = state["epoch"] + 1
        best = state["best"]
        step = state["step"]
    else:
        run.write_config(cfg, {"phase": "dfn"})

    src, tgt = adjacent_pair_arrays(train_ds)
    n = src.shape[0]

    for epoch in range(start_epoch, cfg.epochs_dfn):
        t0 = time.time()
        model.train()
        total = 0.0
        gen = generator(cfg.seed, "dfn-perm", epoch)
        for idx in _index_batches(n, cfg.batch_pairs, gen):
            optimizer.zero_grad()
            loss, _ = model.reconstruction_loss(src[idx], tgt[idx])
            _check_finite(loss, f"dfn epoch {epoch}")
            loss.backward()
            optimizer.step()
            step += 1
            total += loss.item() * len(idx)

        val_psnr, val_ssim = evaluate_dfn(model, val_ds)
        if detector.update(val_psnr):
            policy.on_stagnation(optimizer, 0.0)
        row = {
            "phase": "dfn",
            "epoch": epoch,
            "step": step,
            "train_l1": total / n,
            "val_psnr": val_psnr,
            "val_ssim": val_ssim,
            "lr": optimizer.param_groups[0]["lr"],
            "seconds": round(time.time() - t0, 2),
        }
        run.append_metrics(row)
        payload = {
            "kind": "dfn",
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "detector": detector.state_dict(),
            "policy": policy.state_dict(),
            "epoch": epoch,
            "step": step,
            "best": max(best, val_psnr),
            "config": cfg.to_dict(),
        }
        save_checkpoint(ckpt_path, payload)
        if val_psnr > best:
            best = val_psnr
            save_checkpoint(run.file("best.ckpt"), payload)

    return {"best_val_psnr": best, "epochs": cfg.epochs_dfn, "out_dir": out_dir}


def load_dfn(cfg, ckpt_path):
    state = load_checkpoint(ckpt_path)
    model = DeformationFlowNetwork(base_width=state["config"]["dfn_width"])
    model.load_state_dict(state["model"])
    model.eval()
    return model


def extract_flows_to(model, dataset, flow_root, batch_size=64):
    """Predict and store fields for every clip of a dataset split."""
    from .dfn import extract_clip_flows

    os.makedirs(os.path.join(flow_root, dataset.split), exist_ok=True)
    model.eval()
    written = []
    for i in range(len(dataset)):
        frames = dataset.load_frames(i)
        fields = extract_clip_flows(model, frames, batch_size=batch_size)
        path = os.path.join(flow_root, dataset.split, dataset.clips[i]["clip_id"] + ".dfld")
        save_fields(path, fields)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Classifiers


def make_branch(cfg, modality):
    torch.manual_seed(derive_seed(cfg.seed, "branch-init", modality))
    return Branch(
        modality,
        num_classes=cfg.num_classes,
        base_width=cfg.classifier_width,
        hidden_size=cfg.hidden_size,
    )


def make_two_stream(cfg):
    torch.manual_seed(derive_seed(cfg.seed, "two-stream-init"))
    return TwoStreamModel(
        num_classes=cfg.num_classes,
        base_width=cfg.classifier_width,
        hidden_size=cfg.hidden_size,
    )


class FrontProbe(nn.Module):
    """Temporary head for front-end pretraining: time-average plus linear."""

    def __init__(self, feature_dim, num_classes):
        super().__init__()
        self.head = nn.Linear(feature_dim, num_classes)

    def forward(self, features):
        return self.head(features.mean(dim=1))


def _branch_input(batch, modality):
    return batch["gray"] if modality == "gray" else batch["flow"]


def evaluate_branch(branch, dataset, batch_size=8):
    """Top-1 accuracy of one branch on a dataset split (center crops)."""
    branch.eval()
    preds, labels = [], []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            batch = batched_clip_tensors(dataset, idx, with_flows=branch.modality == "flow")
            logits = branch(_branch_input(batch, branch.modality))
            preds.append(logits.argmax(dim=-1))
            labels.append(batch["label"])
    return accuracy(torch.cat(preds).numpy(), torch.cat(labels).numpy())


def evaluate_two_stream(model, dataset, batch_size=8, strategies=("mul_prob",)):
    """Branch and fused accuracies on a split; returns a dict of scores."""
    model.eval()
    logits_g, logits_d, fused_res4, labels = [], [], [], []
    need_res4 = "add_res4" in strategies
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            batch = batched_clip_tensors(dataset, idx)
            zg, zd = model(batch["gray"], batch["flow"])
            logits_g.append(zg)
            logits_d.append(zd)
            labels.append(batch["label"])
            if need_res4:
                fused_res4.append(model.fused_res4_logits(batch["gray"], batch["flow"]))
    zg = torch.cat(logits_g)
    zd = torch.cat(logits_d)
    y = torch.cat(labels).numpy()
    out = {
        "acc_gray": accuracy(zg.argmax(-1).numpy(), y),
        "acc_flow": accuracy(zd.argmax(-1).numpy(), y),
    }
    for strategy in strategies:
        if strategy == "add_res4":
            fused = torch.cat(fused_res4).softmax(-1)
        else:
            fused = fuse_predictions(zg, zd, strategy)
        out[f"acc_{strategy}"] = accuracy(fused.argmax(-1).numpy(), y)
    return out


def _param_groups_for_branch(branch, lr):
    return [
        {"params": list(branch.front_parameters()), "lr": lr, "role": "front"},
        {"params": list(branch.backend_parameters()), "lr": lr, "role": "back"},
    ]


def train_branch(cfg, modality, train_ds, val_ds, out_dir, stages=("joint",), resume=False):
    """Train one branch with cross entropy through the given stage sequence.

    Stages: "front" trains the front-end plus a throwaway time-average
    probe head, "back" trains the recurrent back-end against a frozen
    front-end, "joint" trains everything.  Epoch counts come from
    epochs_branch for every stage.
    """
    run = RunDir(out_dir)
    branch = make_branch(cfg, modality)
    probe = FrontProbe(branch.feature_dim, cfg.num_classes)

    state_stage, state_epoch = 0, 0
    detector = StagnationDetector(cfg.patience, cfg.min_delta)
    policy = DecayPolicy()
    optimizer = None
    best = -np.inf
    step = 0
    ckpt_path = run.file("last.ckpt")

    def build_optimizer(stage):
        if stage == "front":
            groups = [
                {"params": list(branch.front_parameters()), "lr": cfg.lr, "role": "front"},
                {"params": list(probe.parameters()), "lr": cfg.lr, "role": "back"},
            ]
        elif stage == "back":
            groups = [{"params": list(branch.backend_parameters()), "lr": cfg.lr, "role": "back"}]
        else:
            groups = _param_groups_for_branch(branch, cfg.lr)
        return torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-8)

    if resume and os.path.exists(ckpt_path):
        state = load_checkpoint(ckpt_path)
        branch.load_state_dict(state["model"])
        probe.load_state_dict(state["probe"])
        detector.load_state_dict(state["detector"])
        policy.load_state_dict(state["policy"])
        state_stage = state["stage"]
        state_epoch = state["epoch"] + 1
        best = state["best"]
        step = state["step"]
        optimizer = build_optimizer(stages[state_stage])
        optimizer.load_state_dict(state["optimizer"])
        if state_epoch >= cfg.epochs_branch:
            state_stage += 1
            state_epoch = 0
            optimizer = None
    else:
        run.write_config(cfg, {"phase": f"branch-{modality}", "stages": list(stages)})

    n = len(train_ds)
    for stage_idx in range(state_stage, len(stages)):
        stage = stages[stage_idx]
        if optimizer is None:
            optimizer = build_optimizer(stage)
        frozen_front = stage == "back"
        for p in branch.front_parameters():
            p.requires_grad_(not frozen_front)

        for epoch in range(state_epoch if stage_idx == state_stage else 0, cfg.epochs_branch):
            t0 = time.time()
            branch.train()
            probe.train()
            if frozen_front:
                branch.front.eval()
                branch.trunk.eval()
            total = 0.0
            gen = generator(cfg.seed, "branch-perm", modality, stage, epoch)
            for idx in _index_batches(n, cfg.batch_clips, gen):
                batch = batched_clip_tensors(
                    train_ds, idx.tolist(), seed=cfg.seed, epoch=epoch,
                    with_flows=modality == "flow",
                )
                optimizer.zero_grad()
                x = _branch_input(batch, modality)
                if stage == "front":
                    logits = probe(branch.forward_features(x))
                else:
                    logits = branch(x)
                loss = F.cross_entropy(logits, batch["label"])
                _check_finite(loss, f"branch-{modality} {stage} epoch {epoch}")
                loss.backward()
                optimizer.step()
                step += 1
                total += loss.item() * len(idx)

            val_acc = evaluate_branch(branch, val_ds) if stage != "front" else _probe_accuracy(
                branch, probe, val_ds, modality
            )
            if detector.update(val_acc):
                policy.on_stagnation(optimizer, 0.0)
            run.append_metrics(
                {
                    "phase": f"branch-{modality}",
                    "stage": stage,
                    "epoch": epoch,
                    "step": step,
                    "train_loss": total / n,
                    "val_acc": val_acc,
                    "lr": optimizer.param_groups[0]["lr"],
                    "seconds": round(time.time() - t0, 2),
                }
            )
            payload = {
                "kind": f"branch-{modality}",
                "model": branch.state_dict(),
                "probe": probe.state_dict(),
                "optimizer": optimizer.state_dict(),
                "detector": detector.state_dict(),
                "policy": policy.state_dict(),
                "stage": stage_idx,
                "epoch": epoch,
                "step": step,
                "best": max(best, val_acc),
                "config": cfg.to_dict(),
            }
            save_checkpoint(ckpt_path, payload)
            if val_acc > best:
                best = val_acc
                save_checkpoint(run.file("best.ckpt"), payload)
        optimizer = None
        state_epoch = 0
    for p in branch.front_parameters():
        p.requires_grad_(True)
    return {"best_val_acc": best, "out_dir": out_dir, "modality": modality}


def _probe_accuracy(branch, probe, dataset, modality, batch_size=8):
    branch.eval()
    probe.eval()
    preds, labels = [], []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            batch = batched_clip_tensors(dataset, idx, with_flows=modality == "flow")
            logits = probe(branch.forward_features(_branch_input(batch, modality)))
            preds.append(logits.argmax(-1))
            labels.append(batch["label"])
    return accuracy(torch.cat(preds).numpy(), torch.cat(labels).numpy())


def train_two_stream(cfg, train_ds, val_ds, out_dir, resume=False, init_from=None):
    """Mutual-distillation training of both branches; watches fused accuracy.

    init_from: optional dict with "gray" / "flow" checkpoint paths whose
    branch weights seed the two streams.
    """
    run = RunDir(out_dir)
    model = make_two_stream(cfg)
    if init_from:
        if "gray" in init_from:
            model.gray.load_state_dict(load_checkpoint(init_from["gray"])["model"])
        if "flow" in init_from:
            model.flow.load_state_dict(load_checkpoint(init_from["flow"])["model"])

    optimizer = torch.optim.Adam(
        _param_groups_for_branch(model.gray, cfg.lr) + _param_groups_for_branch(model.flow, cfg.lr),
        betas=(0.9, 0.999), eps=1e-8,
    )
    detector = StagnationDetector(cfg.patience, cfg.min_delta)
    policy = DecayPolicy()
    lam = cfg.lambda_init
    start_epoch = 0
    best = -np.inf
    step = 0
    ckpt_path = run.file("last.ckpt")

    if resume and os.path.exists(ckpt_path):
        state = load_checkpoint(ckpt_path)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        detector.load_state_dict(state["detector"])
        policy.load_state_dict(state["policy"])
        lam = state["lam"]
        start_epoch = state["epoch"] + 1
        best = state["best"]
        step = state["step"]
    else:
        run.write_config(cfg, {"phase": "two-stream", "init_from": init_from or {}})

    n = len(train_ds)
    for epoch in range(start_epoch, cfg.epochs_joint):
        t0 = time.time()
        model.train()
        total = 0.0
        parts_acc = {"ce_gray": 0.0, "ce_flow": 0.0, "kd": 0.0}
        gen = generator(cfg.seed, "joint-perm", epoch)
        for idx in _index_batches(n, cfg.batch_clips, gen):
            batch = batched_clip_tensors(train_ds, idx.tolist(), seed=cfg.seed, epoch=epoch)
            optimizer.zero_grad()
            zg, zd = model(batch["gray"], batch["flow"])
            loss, parts = total_loss(
                zg, zd, batch["label"], lam, cfg.temperature, mode=cfg.distill_mode
            )
            _check_finite(loss, f"two-stream epoch {epoch}")
            loss.backward()
            optimizer.step()
            step += 1
            total += loss.item() * len(idx)
            for key in parts_acc:
                parts_acc[key] += parts[key] * len(idx)

        scores = evaluate_two_stream(model, val_ds)
        val_acc = scores["acc_mul_prob"]
        if detector.update(val_acc):
            lam = policy.on_stagnation(optimizer, lam)
        row = {
            "phase": "two-stream",
            "epoch": epoch,
            "step": step,
            "train_loss": total / n,
            "lambda": lam,
            "lr": optimizer.param_groups[0]["lr"],
            "seconds": round(time.time() - t0, 2),
        }
        row.update({k: v / n for k, v in parts_acc.items()})
        row.update(scores)
        run.append_metrics(row)
        payload = {
            "kind": "two-stream",
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "detector": detector.state_dict(),
            "policy": policy.state_dict(),
            "lam": lam,
            "epoch": epoch,
            "step": step,
            "best": max(best, val_acc),
            "config": cfg.to_dict(),
        }
        save_checkpoint(ckpt_path, payload)
        if val_acc > best:
            best = val_acc
            save_checkpoint(run.file("best.ckpt"), payload)

    return {"best_val_acc": best, "out_dir": out_dir}


def load_two_stream(ckpt_path):
    state = load_checkpoint(ckpt_path)
    cfg_map = state["config"]
    model = TwoStreamModel(
        num_classes=cfg_map["num_classes"],
        base_width=cfg_map["classifier_width"],
        hidden_size=cfg_map["hidden_size"],
    )
    model.load_state_dict(state["model"])
    model.eval()
    return model, state


def _clip_fields_batch(dfn, dataset, indices, crop):
    """Fields for whole clips with gradient kept, center-cropped to the
    classifier window.  Returns (B, T-1, 2, crop, crop) plus labels."""
    fields, labels = [], []
    for i in indices:
        frames = torch.from_numpy(dataset.load_frames(int(i)))
        src = frames[:-1].unsqueeze(1)
        tgt = frames[1:].unsqueeze(1)
        fields.append(dfn(src, tgt))
        labels.append(dataset.clips[int(i)]["label"])
    fields = torch.stack(fields)
    fields = pad_flow_sequence(fields, fields.shape[1] + 1)
    h, w = fields.shape[-2:]
    top, left = (h - crop) // 2, (w - crop) // 2
    fields = fields[..., top:top + crop, left:left + crop]
    return fields, torch.tensor(labels, dtype=torch.long)


def finetune_flow_encoder(cfg, dfn, flow_branch, train_ds, val_ds, out_dir, resume=False):
    """End-to-end refinement of the flow producer under the recognition loss.

    Only the frame encoder of the flow network trains; its field decoder
    and the whole classifier branch stay frozen, so the label signal can
    reshape what the encoder attends to without collapsing the field
    geometry.  Clips are center-cropped and never augmented here: fields
    are recomputed from pixels inside the graph, and flips would demand
    the sign fix-up that stored-field training gets from the loader.
    """
    run = RunDir(out_dir)
    for p in dfn.decoder.parameters():
        p.requires_grad_(False)
    for p in flow_branch.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam(
        [{"params": dfn.encoder.parameters(), "lr": cfg.lr_finetune, "role": "front"}],
        betas=(0.9, 0.999), eps=1e-8,
    )
    detector = StagnationDetector(cfg.patience, cfg.min_delta)
    policy = DecayPolicy()
    start_epoch = 0
    best = -np.inf
    step = 0
    ckpt_path = run.file("last.ckpt")

    if resume and os.path.exists(ckpt_path):
        state = load_checkpoint(ckpt_path)
        dfn.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        detector.load_state_dict(state["detector"])
        policy.load_state_dict(state["policy"])
        start_epoch = state["epoch"] + 1
        best = state["best"]
        step = state["step"]
    else:
        run.write_config(cfg, {"phase": "finetune-flow-encoder"})

    def live_accuracy(dataset):
        dfn.eval()
        flow_branch.eval()
        preds, labels = [], []
        with torch.no_grad():
            for start in range(0, len(dataset), cfg.batch_clips):
                idx = range(start, min(start + cfg.batch_clips, len(dataset)))
                fields, y = _clip_fields_batch(dfn, dataset, idx, cfg.crop_size)
                preds.append(flow_branch(fields).argmax(-1))
                labels.append(y)
        return accuracy(torch.cat(preds).numpy(), torch.cat(labels).numpy())

    n = len(train_ds)
    for epoch in range(start_epoch, cfg.epochs_finetune):
        t0 = time.time()
        dfn.train()
        flow_branch.eval()
        total = 0.0
        gen = generator(cfg.seed, "finetune-perm", epoch)
        for idx in _index_batches(n, cfg.batch_clips, gen):
            optimizer.zero_grad()
            fields, y = _clip_fields_batch(dfn, train_ds, idx.tolist(), cfg.crop_size)
            loss = F.cross_entropy(flow_branch(fields), y)
            _check_finite(loss, f"finetune epoch {epoch}")
            loss.backward()
            optimizer.step()
            step += 1
            total += loss.item() * len(idx)

        val_acc = live_accuracy(val_ds)
        if detector.update(val_acc):
            policy.on_stagnation(optimizer, 0.0)
        run.append_metrics(
            {
                "phase": "finetune-flow-encoder",
                "epoch": epoch,
                "step": step,
                "train_loss": total / n,
                "val_acc": val_acc,
                "lr": optimizer.param_groups[0]["lr"],
                "seconds": round(time.time() - t0, 2),
            }
        )
        payload = {
            "kind": "dfn-finetuned",
            "model": dfn.state_dict(),
            "optimizer": optimizer.state_dict(),
            "detector": detector.state_dict(),
            "policy": policy.state_dict(),
            "epoch": epoch,
            "step": step,
            "best": max(best, val_acc),
            "config": cfg.to_dict(),
        }
        save_checkpoint(ckpt_path, payload)
        if val_acc > best:
            best = val_acc
            save_checkpoint(run.file("best.ckpt"), payload)
    for p in dfn.decoder.parameters():
        p.requires_grad_(True)
    for p in flow_branch.parameters():
        p.requires_grad_(True)
    return {"best_val_acc": best, "out_dir": out_dir}


def load_branch(ckpt_path, modality):
    state = load_checkpoint(ckpt_path)
    cfg_map = state["config"]
    branch = Branch(
        modality,
        num_classes=cfg_map["num_classes"],
        base_width=cfg_map["classifier_width"],
        hidden_size=cfg_map["hidden_size"],
    )
    branch.load_state_dict(state["model"])
    branch.eval()
    return branch, state
