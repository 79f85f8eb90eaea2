"""Deformation flow network: frame-pair encoder and field decoder.

The network reads a (source, target) grayscale pair, encodes each frame
with a shared residual encoder into a compact vector, concatenates the
two codes, and decodes a dense two-channel offset field at the input
resolution.  Training is self-supervised: warp the source by the
predicted field and penalize the mean absolute difference to the target,
so no labels of any kind are involved.
"""

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import init_conv_weights, residual_stages
from .errors import ShapeError
from .warp import bilinear_warp, photometric_l1


class FrameEncoder(nn.Module):
    """Single-frame encoder: 7x7 stem, four residual stages, global pooling.

    Two fixed coordinate channels are appended to the input frame.
    Global pooling is otherwise nearly blind to where intensity sits,
    and the decoder needs absolute position to express rigid motion
    between the two frames, so the stem sees (intensity, x, y).
    """

    def __init__(self, base_width=32):
        super().__init__()
        self.base_width = base_width
        self.feature_dim = 8 * base_width
        self.stem = nn.Sequential(
            nn.Conv2d(3, base_width, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(base_width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stages = residual_stages(base_width)
        self.pool = nn.AdaptiveAvgPool2d(1)
        init_conv_weights(self)

    @staticmethod
    def _with_coords(frames):
        b, _, h, w = frames.shape
        device, dtype = frames.device, frames.dtype
        ys = torch.linspace(-1.0, 1.0, h, device=device, dtype=dtype).view(1, 1, h, 1)
        xs = torch.linspace(-1.0, 1.0, w, device=device, dtype=dtype).view(1, 1, 1, w)
        return torch.cat(
            [frames, xs.expand(b, 1, h, w), ys.expand(b, 1, h, w)], dim=1
        )

    def forward(self, frames):
        if frames.dim() != 4 or frames.shape[1] != 1:
            raise ShapeError(f"expected frames of shape (B, 1, H, W), got {tuple(frames.shape)}")
        x = self.stem(self._with_coords(frames))
        x = self.stages(x)
        return self.pool(x).flatten(1)


class FieldDecoder(nn.Module):
    """Decode a pair code into a dense offset field.

    Seven transposed-convolution stages, each followed by a fixed x2
    bilinear upsample, grow a 1x1 map to 128x128; channel width halves
    per stage down to the final two offset channels.  The output is then
    bilinearly resized to the requested resolution and left linear, so
    offsets are unbounded in either direction.
    """

    NUM_STAGES = 7

    def __init__(self, in_dim):
        super().__init__()
        self.in_dim = in_dim
        widths = [in_dim]
        for i in range(self.NUM_STAGES - 1):
            widths.append(max(in_dim // (2 ** (i + 1)), 2))
        widths.append(2)
        self.deconvs = nn.ModuleList(
            nn.ConvTranspose2d(widths[i], widths[i + 1], 3, stride=1, padding=1)
            for i in range(self.NUM_STAGES)
        )
        init_conv_weights(self)
        # Zero offsets at initialization: the first warps are identity maps,
        # so optimization starts from the no-motion baseline instead of a
        # random scrambling of the source.
        nn.init.zeros_(self.deconvs[-1].weight)
        nn.init.zeros_(self.deconvs[-1].bias)

    def forward(self, code, output_size):
        x = code.view(code.shape[0], self.in_dim, 1, 1)
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)
            if i < self.NUM_STAGES - 1:
                x = F.relu(x, inplace=True)
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.interpolate(x, size=tuple(output_size), mode="bilinear", align_corners=False)


class DeformationFlowNetwork(nn.Module):
    """Encoder-decoder predicting per-pixel offsets between two frames."""

    def __init__(self, base_width=32):
        super().__init__()
        self.encoder = FrameEncoder(base_width)
        self.decoder = FieldDecoder(2 * self.encoder.feature_dim)

    def forward(self, source, target):
        """Offset field of shape (B, 2, H, W): channel 0 is dx, channel 1 dy."""
        if source.shape != target.shape:
            raise ShapeError(f"source {tuple(source.shape)} and target {tuple(target.shape)} differ")
        code = torch.cat([self.encoder(source), self.encoder(target)], dim=1)
        return self.decoder(code, source.shape[-2:])

    def warp_source(self, source, field):
        """Apply a (B, 2, H, W) field to (B, 1, H, W) frames."""
        warped = bilinear_warp(source[:, 0], field.permute(0, 2, 3, 1))
        return warped.unsqueeze(1)

    def reconstruction_loss(self, source, target):
        """Self-supervised photometric L1; returns (loss, field) for logging."""
        field = self(source, target)
        warped = self.warp_source(source, field)
        return photometric_l1(warped, target), field


def extract_clip_flows(model, clip, batch_size=32):
    """Predict fields for all adjacent pairs of a clip.

    Args:
        model: a DeformationFlowNetwork (switched to eval mode here).
        clip: array or tensor of shape (T, H, W) with intensities in [0, 1].
        batch_size: pairs per forward pass.

    Returns:
        float32 array of shape (T - 1, H, W, 2), channels-last offsets.
    """
    frames = torch.as_tensor(np.asarray(clip), dtype=torch.float32)
    if frames.dim() != 3 or frames.shape[0] < 2:
        raise ShapeError(f"expected a clip of shape (T >= 2, H, W), got {tuple(frames.shape)}")
    model.eval()
    out = []
    with torch.no_grad():
        sources = frames[:-1].unsqueeze(1)
        targets = frames[1:].unsqueeze(1)
        for start in range(0, sources.shape[0], batch_size):
            field = model(sources[start:start + batch_size], targets[start:start + batch_size])
            out.append(field.permute(0, 2, 3, 1).cpu().numpy())
    return np.concatenate(out, axis=0).astype(np.float32)
