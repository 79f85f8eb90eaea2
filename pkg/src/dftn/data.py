"""Clip loading, cropping, augmentation, and flow alignment.

A dataset directory holds PNG frames per clip plus a manifest (see
synthetic.py for the layout).  Deformation fields live in a parallel
directory of .dfld files, one per clip, aligned so that fields[t] maps
frame t onto frame t+1.

Augmentation makes one decision per clip: a single crop window and a
single flip bit cover every frame and every field of that clip, and
flipped clips get mirrored fields with the horizontal component
negated.  Decisions are derived from (seed, epoch, clip index), so any
epoch can be replayed exactly.
"""

import os

import numpy as np
import torch
from PIL import Image

from .branches import pad_flow_sequence
from .errors import DataFormatError, ShapeError
from .synthetic import load_manifest
from .warp import flip_field_horizontal, load_fields

DEFAULT_CROP = 88


def augmentation_rng(seed, epoch, index):
    """Stable generator for the per-clip crop and flip decisions."""
    return np.random.default_rng([seed, 303, epoch, index])


def choose_window(rng, frame_size, crop_size, augment):
    """One (x0, y0, flip) decision; center window and no flip when not augmenting."""
    margin = frame_size - crop_size
    if margin < 0:
        raise ShapeError(f"crop {crop_size} larger than frame {frame_size}")
    if augment:
        x0 = int(rng.integers(0, margin + 1))
        y0 = int(rng.integers(0, margin + 1))
        flip = bool(rng.random() < 0.5)
    else:
        x0 = y0 = margin // 2
        flip = False
    return x0, y0, flip


def apply_window(frames, fields, x0, y0, crop_size, flip):
    """Crop frames (T, S, S) and fields (T-1, S, S, 2) to the same window.

    Offsets are relative displacements, so cropping leaves their values
    alone; flipping mirrors both frames and fields consistently.
    """
    frames = frames[:, y0:y0 + crop_size, x0:x0 + crop_size]
    if flip:
        frames = frames[:, :, ::-1].copy()
    out_fields = None
    if fields is not None:
        out_fields = fields[:, y0:y0 + crop_size, x0:x0 + crop_size, :]
        if flip:
            out_fields = flip_field_horizontal(out_fields)
        out_fields = np.ascontiguousarray(out_fields)
    return np.ascontiguousarray(frames), out_fields


class ClipDataset:
    """Frames, labels, and optional fields for one split of a dataset root."""

    def __init__(self, root, split, flow_root=None, crop_size=DEFAULT_CROP, augment=False):
        self.root = root
        self.split = split
        self.flow_root = flow_root
        self.crop_size = crop_size
        self.augment = augment
        manifest = load_manifest(root)
        self.num_classes = manifest["num_classes"]
        self.clip_len = manifest["clip_len"]
        self.frame_size = manifest["frame_size"]
        self.clips = [c for c in manifest["clips"] if c["split"] == split]
        if not self.clips:
            raise DataFormatError(f"split {split!r} has no clips under {root}")

    def __len__(self):
        return len(self.clips)

    def subset(self, per_class):
        """A view keeping only the first per_class clips of each label."""
        import copy

        view = copy.copy(self)
        kept, seen = [], {}
        for clip in self.clips:
            label = clip["label"]
            if seen.get(label, 0) < per_class:
                kept.append(clip)
                seen[label] = seen.get(label, 0) + 1
        view.clips = kept
        return view

    def label(self, index):
        return self.clips[index]["label"]

    def labels(self):
        return np.array([c["label"] for c in self.clips], dtype=np.int64)

    def clip_dir(self, index):
        return os.path.join(self.root, self.split, self.clips[index]["clip_id"])

    def flow_path(self, index):
        if self.flow_root is None:
            raise DataFormatError("dataset was opened without a flow_root")
        return os.path.join(self.flow_root, self.split, self.clips[index]["clip_id"] + ".dfld")

    def load_frames(self, index):
        """Full-resolution frames (T, S, S) float32 in [0, 1]."""
        entry = self.clips[index]
        clip_dir = self.clip_dir(index)
        frames = np.empty((entry["num_frames"], self.frame_size, self.frame_size), dtype=np.float32)
        for t in range(entry["num_frames"]):
            path = os.path.join(clip_dir, f"frame_{t:03d}.png")
            with Image.open(path) as img:
                img = img.convert("L")
                if img.size != (self.frame_size, self.frame_size):
                    img = img.resize((self.frame_size, self.frame_size), Image.BILINEAR)
                frames[t] = np.asarray(img, dtype=np.float32) / 255.0
        return frames

    def load_flows(self, index):
        """Fields (T-1, S, S, 2) aligned with this clip's adjacent frame pairs."""
        fields = load_fields(self.flow_path(index))
        if fields.shape[0] != self.clips[index]["num_frames"] - 1:
            raise DataFormatError(
                f"{self.flow_path(index)}: {fields.shape[0]} fields for a "
                f"{self.clips[index]['num_frames']}-frame clip"
            )
        return fields

    def sample(self, index, seed=0, epoch=0, with_flows=True):
        """One training example: cropped gray clip, padded field sequence, label.

        Returns a dict with "gray" (1, T, c, c) float32, "flow"
        (T, 2, c, c) when requested, and "label".
        """
        frames = self.load_frames(index)
        fields = self.load_flows(index) if with_flows else None
        rng = augmentation_rng(seed, epoch, index)
        x0, y0, flip = choose_window(rng, self.frame_size, self.crop_size, self.augment)
        frames, fields = apply_window(frames, fields, x0, y0, self.crop_size, flip)
        out = {
            "gray": torch.from_numpy(frames).unsqueeze(0),
            "label": self.clips[index]["label"],
            "clip_id": self.clips[index]["clip_id"],
        }
        if with_flows:
            seq = torch.from_numpy(fields).permute(0, 3, 1, 2)
            out["flow"] = pad_flow_sequence(seq, frames.shape[0])
        return out

    def speakers(self):
        return {c["speaker"] for c in self.clips}


def adjacent_pair_arrays(dataset, indices=None):
    """All (source, target) adjacent full-resolution pairs of the chosen clips.

    Returns two float32 tensors of shape (N, 1, S, S); used for
    self-supervised flow training, which needs no crops or labels.
    """
    indices = range(len(dataset)) if indices is None else indices
    sources, targets = [], []
    for i in indices:
        frames = dataset.load_frames(i)
        sources.append(frames[:-1])
        targets.append(frames[1:])
    src = torch.from_numpy(np.concatenate(sources)).unsqueeze(1)
    tgt = torch.from_numpy(np.concatenate(targets)).unsqueeze(1)
    return src, tgt


def batched_clip_tensors(dataset, indices, seed=0, epoch=0, with_flows=True):
    """Stack samples into batch tensors: gray (B, 1, T, c, c), flow (B, T, 2, c, c)."""
    grays, flows, labels = [], [], []
    for i in indices:
        s = dataset.sample(i, seed=seed, epoch=epoch, with_flows=with_flows)
        grays.append(s["gray"])
        labels.append(s["label"])
        if with_flows:
            flows.append(s["flow"])
    batch = {
        "gray": torch.stack(grays),
        "label": torch.tensor(labels, dtype=torch.int64),
    }
    if with_flows:
        batch["flow"] = torch.stack(flows)
    return batch
