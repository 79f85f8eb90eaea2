"""Procedural talking-mouth clips for training and evaluation.

Each class is an articulation rhythm: class k pulses the mouth region
at a fixed number of cycles per clip.  The pulse is a smooth radial
swell of the area around the mouth - lips and nearby texture breathe
outward and back - so the whole motion of a clip (swell plus head
drift) stays inside the family of smooth warps that a deformation
field can represent exactly.  Every clip randomizes the phase of the
rhythm uniformly, so the distribution of any single frame is identical
across classes and only the temporal pattern carries the label.
Speakers contribute the appearance: a smooth cosine-mixture face
texture and the mouth geometry.  The head drift is a multi-pixel
random walk, which keeps adjacent frames misaligned enough that an
identity warp scores badly while the true motion stays easy to
regress.

Speakers are assigned to exactly one split, so train and test clips
never share appearance.
"""

import json
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DataFormatError

MANIFEST_NAME = "manifest.json"

# Background cosine mixture.  Low-to-mid spatial frequencies (cycles per
# image) paired with multi-pixel drift steps: adjacent frames are far out
# of alignment, yet the photometric penalty for a sub-pixel regression
# residual stays small, so accurate warping is both necessary and
# attainable.
_BG_COMPONENTS = 6
_BG_FREQ_RANGE = (5.0, 11.0)
_BG_AMP_RANGE = (0.10, 0.16)

_DRIFT_STEP_RANGE = (0.8, 1.6)   # px per frame-to-frame step, magnitude
_DRIFT_MAX_EXCURSION = 18.0      # cap on total displacement from frame 0, px
_BRIGHTNESS_RANGE = (0.85, 1.15)
_NOISE_SIGMA = 0.01
_AMPLITUDE_JITTER = (0.8, 1.0)

# Mouth articulation: openness scales a radial swell with a Gaussian
# envelope.  Displacement peaks at 0.61 * _SWELL_AMP on the ring one
# sigma from the mouth center and decays smoothly to ~0.1 px at the
# frame border, so the motion is strong where the lips are and the
# field stays representable by a smooth decoder.  Opening also widens
# the ellipse vertically and darkens its interior: appearance cues that
# the intensity stream reads from pooled features, sized so their
# unwarpable photometric residual stays small next to the swell.
_SWELL_AMP = 5.0                 # px at the envelope's linear-radial peak
_SWELL_SIGMA_FRAC = 0.24         # envelope sigma as a fraction of frame size
_SHADE_SWING = 0.6               # fraction of mouth shade removed at full openness
_APERTURE_BASE = 0.5             # vertical radius factor at closed ...
_APERTURE_SWING = 0.6            # ... plus this much at full openness


@dataclass
class DatasetSpec:
    """Size and layout of a generated dataset."""

    num_classes: int = 10
    frame_size: int = 96
    clip_len: int = 29
    clips_per_class: dict = field(
        default_factory=lambda: {"train": 50, "val": 10, "test": 10}
    )
    speakers_per_split: dict = field(
        default_factory=lambda: {"train": 10, "val": 2, "test": 2}
    )
    seed: int = 0

    def class_frequency(self, label):
        """Aperture cycles per clip for a class; distinct and well separated."""
        return 0.5 * (label + 1)


def _split_key(split):
    # Stable across processes, unlike the builtin string hash.
    return zlib.crc32(split.encode("utf-8"))


def _speaker_params(spec, split, speaker_idx):
    rng = np.random.default_rng([spec.seed, 101, _split_key(split), speaker_idx])
    s = spec.frame_size
    return {
        "bg_u": rng.uniform(*_BG_FREQ_RANGE, _BG_COMPONENTS) * rng.choice([-1, 1], _BG_COMPONENTS),
        "bg_v": rng.uniform(*_BG_FREQ_RANGE, _BG_COMPONENTS) * rng.choice([-1, 1], _BG_COMPONENTS),
        "bg_amp": rng.uniform(*_BG_AMP_RANGE, _BG_COMPONENTS),
        "bg_phase": rng.uniform(0.0, 2.0 * np.pi, _BG_COMPONENTS),
        "mouth_cx": s / 2 + rng.uniform(-0.05, 0.05) * s,
        "mouth_cy": s / 2 + rng.uniform(-0.02, 0.08) * s,
        "mouth_rx": rng.uniform(0.19, 0.24) * s,
        "mouth_ry": rng.uniform(0.10, 0.14) * s,
        "mouth_shade": rng.uniform(0.18, 0.28),
    }


def aperture_waveform(freq, phase, amplitude, clip_len):
    """Openness in [0, 1] per frame: a phase-shifted sine at freq cycles per clip."""
    t = np.arange(clip_len, dtype=np.float64)
    return amplitude * 0.5 * (1.0 + np.sin(2.0 * np.pi * freq * t / clip_len + phase))


def render_clip(spec, speaker, label, clip_rng, return_motion=False):
    """Render one clip as float32 frames (T, S, S) in [0, 1].

    Every frame evaluates one static face texture (cosine mixture plus
    a dark mouth ellipse) at warped coordinates: a drift translation
    composed with the openness-scaled radial swell around the mouth.
    Deterministic given the speaker parameter dict, the label, and the
    state of clip_rng.  With return_motion the per-frame drift offsets
    (T, 2) in (x, y) pixels come back too; away from the mouth, where
    the swell envelope vanishes, the backward field of the pair
    (t, t+1) approaches the constant offsets[t] - offsets[t+1].
    """
    s = spec.frame_size
    t_len = spec.clip_len
    phase = clip_rng.uniform(0.0, 2.0 * np.pi)
    amplitude = clip_rng.uniform(*_AMPLITUDE_JITTER)
    openness = aperture_waveform(spec.class_frequency(label), phase, amplitude, t_len)

    # Head drift is a random walk: every frame moves by a fresh multi-pixel
    # step, so adjacent frames never align.  The walk is rescaled if it
    # wanders too far, keeping the mouth well inside the frame.
    step_angles = clip_rng.uniform(0.0, 2.0 * np.pi, size=t_len - 1)
    step_sizes = clip_rng.uniform(*_DRIFT_STEP_RANGE, size=t_len - 1)
    steps = np.stack([step_sizes * np.cos(step_angles), step_sizes * np.sin(step_angles)], axis=1)
    offsets = np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])
    reach = np.sqrt((offsets ** 2).sum(axis=1)).max()
    if reach > _DRIFT_MAX_EXCURSION:
        offsets *= _DRIFT_MAX_EXCURSION / reach
    gain = clip_rng.uniform(*_BRIGHTNESS_RANGE)
    jitter = clip_rng.uniform(-2.0, 2.0, size=2)

    cx = speaker["mouth_cx"] + jitter[0]
    cy = speaker["mouth_cy"] + jitter[1]
    sigma = _SWELL_SIGMA_FRAC * s

    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    frames = np.empty((t_len, s, s), dtype=np.float32)
    for t in range(t_len):
        off = offsets[t]
        # Swell is centered on the drifted mouth; sampling the texture at
        # p - offset - swell(p) pushes it radially outward as the mouth opens.
        dx = xs - (cx + off[0])
        dy = ys - (cy + off[1])
        envelope = np.exp(-(dx ** 2 + dy ** 2) / (2.0 * sigma ** 2))
        scale = _SWELL_AMP * openness[t] * envelope / sigma
        x = xs - off[0] - scale * dx
        y = ys - off[1] - scale * dy

        img = np.full((s, s), 0.55, dtype=np.float64)
        for i in range(_BG_COMPONENTS):
            arg = 2.0 * np.pi * (speaker["bg_u"][i] * x + speaker["bg_v"][i] * y) / s
            img += speaker["bg_amp"][i] * np.cos(arg + speaker["bg_phase"][i])

        ry = speaker["mouth_ry"] * (_APERTURE_BASE + _APERTURE_SWING * openness[t])
        d = ((x - cx) / speaker["mouth_rx"]) ** 2 + ((y - cy) / ry) ** 2
        inside = 1.0 / (1.0 + np.exp(np.clip((d - 1.0) * 8.0, -30.0, 30.0)))
        shade = speaker["mouth_shade"] * (1.0 - _SHADE_SWING * openness[t])
        img = img * (1.0 - inside) + inside * shade * img

        img *= gain
        img += clip_rng.normal(0.0, _NOISE_SIGMA, size=(s, s))
        frames[t] = np.clip(img, 0.0, 1.0)
    if return_motion:
        return frames, offsets
    return frames


def clip_plan(spec):
    """Flat list of clips to generate: (split, label, index, speaker_idx, clip_id)."""
    plan = []
    for split, per_class in spec.clips_per_class.items():
        n_speakers = spec.speakers_per_split[split]
        for label in range(spec.num_classes):
            for idx in range(per_class):
                speaker_idx = (label * per_class + idx) % n_speakers
                clip_id = f"{split}_{label:02d}_{idx:03d}"
                plan.append((split, label, idx, speaker_idx, clip_id))
    return plan


def generate_dataset(root, spec=None):
    """Write PNG frames plus a manifest under root; returns the manifest dict.

    Layout: root/<split>/<clip_id>/frame_<t>.png, 8-bit grayscale.
    Regenerating with the same spec produces identical bytes.
    """
    spec = spec or DatasetSpec()
    os.makedirs(root, exist_ok=True)
    speakers = {
        split: [_speaker_params(spec, split, i) for i in range(n)]
        for split, n in spec.speakers_per_split.items()
    }
    entries = []
    for split, label, idx, speaker_idx, clip_id in clip_plan(spec):
        clip_rng = np.random.default_rng([spec.seed, 202, _split_key(split), label, idx])
        frames = render_clip(spec, speakers[split][speaker_idx], label, clip_rng)
        clip_dir = os.path.join(root, split, clip_id)
        os.makedirs(clip_dir, exist_ok=True)
        for t in range(frames.shape[0]):
            img = Image.fromarray(np.round(frames[t] * 255.0).astype(np.uint8), mode="L")
            img.save(os.path.join(clip_dir, f"frame_{t:03d}.png"))
        entries.append(
            {
                "clip_id": clip_id,
                "split": split,
                "label": label,
                "speaker": f"{split}_spk{speaker_idx:02d}",
                "num_frames": spec.clip_len,
                "frame_size": spec.frame_size,
            }
        )
    manifest = {
        "num_classes": spec.num_classes,
        "clip_len": spec.clip_len,
        "frame_size": spec.frame_size,
        "seed": spec.seed,
        "clips": entries,
    }
    with open(os.path.join(root, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(root):
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataFormatError(f"no {MANIFEST_NAME} under {root}")
    with open(path) as fh:
        manifest = json.load(fh)
    for key in ("num_classes", "clip_len", "frame_size", "clips"):
        if key not in manifest:
            raise DataFormatError(f"{path}: missing manifest key {key!r}")
    return manifest
