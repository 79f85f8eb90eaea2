"""Shared convolutional building blocks for the encoder and the classifier trunks."""

import torch.nn as nn


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with batch norm and an additive shortcut."""

    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def residual_stages(base_width):
    """Four standard stages of two basic blocks each, widths w, 2w, 4w, 8w.

    The first stage keeps resolution; the rest halve it.  Input is
    expected to already have base_width channels.
    """
    stages = []
    in_ch = base_width
    for i, stride in enumerate((1, 2, 2, 2)):
        out_ch = base_width * (2 ** i)
        stages.append(BasicBlock(in_ch, out_ch, stride=stride))
        stages.append(BasicBlock(out_ch, out_ch, stride=1))
        in_ch = out_ch
    return nn.Sequential(*stages)


def init_conv_weights(module):
    """Kaiming init for convolutions, unit scale and zero shift for norms."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
