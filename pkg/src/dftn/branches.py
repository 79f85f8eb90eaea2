"""Two-stream lip reading classifier: grayscale and deformation-flow branches.

Each branch is a front-end, a shared-shape residual trunk applied per
frame, global spatial pooling to one vector per frame, and a recurrent
back-end (two-layer bidirectional GRU plus a linear head over the
time-averaged states).  The grayscale front-end is a 3-D convolution
over (time, height, width); the flow front-end is a 2-D convolution
applied to each two-channel field independently.

Feature-level fusion (add_res4) sums the two per-frame feature
sequences after the trunks and runs the grayscale back-end on the sum;
probability-level strategies live in fusion.py.
"""

import numpy as np
import torch
import torch.nn as nn

from .blocks import init_conv_weights, residual_stages
from .errors import ShapeError


class GrayFront(nn.Module):
    """Spatio-temporal front-end: one 3-D convolution, then spatial pooling."""

    def __init__(self, base_width):
        super().__init__()
        self.conv = nn.Conv3d(1, base_width, (5, 7, 7), stride=(1, 2, 2), padding=(2, 3, 3), bias=False)
        self.bn = nn.BatchNorm3d(base_width)
        self.relu = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool3d((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        init_conv_weights(self)

    def forward(self, clips):
        """(B, 1, T, H, W) to (B*T, C, H/4, W/4) with time folded into batch."""
        if clips.dim() != 5 or clips.shape[1] != 1:
            raise ShapeError(f"expected clips of shape (B, 1, T, H, W), got {tuple(clips.shape)}")
        x = self.pool(self.relu(self.bn(self.conv(clips))))
        b, c, t, h, w = x.shape
        return x.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)


class FlowFront(nn.Module):
    """Per-frame front-end for two-channel offset fields."""

    def __init__(self, base_width):
        super().__init__()
        self.conv = nn.Conv2d(2, base_width, 7, stride=2, padding=3, bias=False)
        self.bn = nn.BatchNorm2d(base_width)
        self.relu = nn.ReLU(inplace=True)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        init_conv_weights(self)

    def forward(self, fields):
        """(B, T, 2, H, W) to (B*T, C, H/4, W/4)."""
        if fields.dim() != 5 or fields.shape[2] != 2:
            raise ShapeError(f"expected fields of shape (B, T, 2, H, W), got {tuple(fields.shape)}")
        b, t = fields.shape[:2]
        x = fields.reshape(b * t, 2, fields.shape[3], fields.shape[4])
        return self.pool(self.relu(self.bn(self.conv(x))))


class RecurrentBackEnd(nn.Module):
    """Two-layer bidirectional GRU over per-frame features, linear head on the time average."""

    def __init__(self, feature_dim, hidden_size, num_classes):
        super().__init__()
        self.gru = nn.GRU(
            feature_dim, hidden_size, num_layers=2, bidirectional=True, batch_first=True
        )
        self.head = nn.Linear(2 * hidden_size, num_classes)

    def forward(self, features):
        states, _ = self.gru(features)
        return self.head(states.mean(dim=1))


class Branch(nn.Module):
    """One classifier stream: front-end, residual trunk, recurrent back-end."""

    def __init__(self, modality, num_classes, base_width=64, hidden_size=None):
        super().__init__()
        if modality not in ("gray", "flow"):
            raise ValueError(f"modality must be 'gray' or 'flow', got {modality!r}")
        self.modality = modality
        self.feature_dim = 8 * base_width
        hidden = hidden_size if hidden_size is not None else 2 * self.feature_dim
        self.front = GrayFront(base_width) if modality == "gray" else FlowFront(base_width)
        self.trunk = residual_stages(base_width)
        self.spatial_pool = nn.AdaptiveAvgPool2d(1)
        self.backend = RecurrentBackEnd(self.feature_dim, hidden, num_classes)
        init_conv_weights(self.trunk)

    def front_parameters(self):
        """Parameters of the front-end plus trunk (everything before the GRU)."""
        yield from self.front.parameters()
        yield from self.trunk.parameters()

    def backend_parameters(self):
        yield from self.backend.parameters()

    def forward_features(self, x):
        """Per-frame feature sequence (B, T, feature_dim) after the trunk."""
        b = x.shape[0]
        t = x.shape[2] if self.modality == "gray" else x.shape[1]
        frames = self.front(x)
        frames = self.trunk(frames)
        frames = self.spatial_pool(frames).flatten(1)
        return frames.reshape(b, t, self.feature_dim)

    def forward(self, x):
        return self.backend(self.forward_features(x))


def pad_flow_sequence(fields, length):
    """Right-pad a (T', 2, H, W) or (B, T', 2, H, W) field sequence to T by repeating the last element."""
    t = fields.shape[-4]
    if t > length:
        raise ShapeError(f"sequence of length {t} longer than target {length}")
    if t == length:
        return fields
    last = fields[..., -1:, :, :, :]
    if torch.is_tensor(fields):
        reps = [1] * fields.dim()
        reps[-4] = length - t
        return torch.cat([fields, last.repeat(*reps)], dim=-4)
    reps = [1] * fields.ndim
    reps[-4] = length - t
    return np.concatenate([fields, np.tile(last, reps)], axis=-4)


class TwoStreamModel(nn.Module):
    """Both branches plus the feature-level fusion path.

    The flow input is expected to be padded to the same number of steps
    as the grayscale clip (repeat the final field), so the two feature
    sequences align frame for frame.
    """

    def __init__(self, num_classes, base_width=64, hidden_size=None):
        super().__init__()
        self.gray = Branch("gray", num_classes, base_width, hidden_size)
        self.flow = Branch("flow", num_classes, base_width, hidden_size)

    def forward(self, gray_clips, flow_clips):
        """Returns (gray logits, flow logits)."""
        return self.gray(gray_clips), self.flow(flow_clips)

    def forward_with_features(self, gray_clips, flow_clips):
        fg = self.gray.forward_features(gray_clips)
        fd = self.flow.forward_features(flow_clips)
        return self.gray.backend(fg), self.flow.backend(fd), fg, fd

    def fused_res4_logits(self, gray_clips, flow_clips):
        """Sum the per-frame features of both trunks, decode with the grayscale back-end."""
        fg = self.gray.forward_features(gray_clips)
        fd = self.flow.forward_features(flow_clips)
        if fg.shape != fd.shape:
            raise ShapeError(
                f"feature sequences differ: {tuple(fg.shape)} vs {tuple(fd.shape)}; "
                "pad the flow sequence to the clip length first"
            )
        return self.gray.backend(fg + fd)
