"""IR / IR-SE residual trunk shared by the inversion encoder and the recognition backbone.

The trunk is the transferable part: input layer plus four residual stages.
Dropout slots exist after every convolution in both uses (rate 0 in the
encoder), so encoder and backbone trunks have identical parameter names.
"""
from __future__ import annotations

import dataclasses

from torch import nn

DEPTH_UNITS = {
    "micro": (1, 1, 1, 1),
    "tiny": (2, 2, 2, 2),
    34: (3, 4, 6, 3),
    50: (3, 4, 14, 3),
    100: (3, 13, 30, 3),
}


@dataclasses.dataclass(frozen=True)
class TrunkConfig:
    depth: int | str = 50
    widths: tuple = (64, 128, 256, 512)
    use_se: bool = True
    input_size: int = 112

    @property
    def units(self) -> tuple:
        try:
            return DEPTH_UNITS[self.depth]
        except KeyError:
            raise ValueError(f"unknown trunk depth {self.depth!r}; choose from {list(DEPTH_UNITS)}") from None

    def spatial(self, stage: int) -> int:
        """Feature-map edge after stage ``stage`` (0-based); each stage halves it (ceil)."""
        s = self.input_size
        for _ in range(stage + 1):
            s = (s + 1) // 2
        return s


class SEModule(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Conv2d(channels, hidden, 1, bias=False)
        self.relu = nn.ReLU(inplace=True)
        self.fc2 = nn.Conv2d(hidden, channels, 1, bias=False)
        self.sigmoid = nn.Sigmoid()

    def forward(self, x):
        s = self.sigmoid(self.fc2(self.relu(self.fc1(self.pool(x)))))
        return x * s


class BottleneckIR(nn.Module):
    def __init__(self, in_channel, depth, stride, use_se, dropout=0.0):
        super().__init__()
        if in_channel == depth and stride == 1:
            self.shortcut_layer = nn.MaxPool2d(1, stride)
        else:
            self.shortcut_layer = nn.Sequential(nn.Conv2d(in_channel, depth, 1, stride, bias=False), nn.BatchNorm2d(depth))
        layers = [
            nn.BatchNorm2d(in_channel),
            nn.Conv2d(in_channel, depth, 3, 1, 1, bias=False),
            nn.Dropout(dropout),
            nn.PReLU(depth),
            nn.Conv2d(depth, depth, 3, stride, 1, bias=False),
            nn.Dropout(dropout),
            nn.BatchNorm2d(depth),
        ]
        if use_se:
            layers.append(SEModule(depth))
        self.res_layer = nn.Sequential(*layers)

    def forward(self, x):
        return self.res_layer(x) + self.shortcut_layer(x)


class Trunk(nn.Module):
    """Returns the feature maps at the end of each of the four stages."""

    def __init__(self, config: TrunkConfig, dropout: float = 0.0):
        super().__init__()
        self.config = config
        w = config.widths
        self.input_layer = nn.Sequential(nn.Conv2d(3, w[0], 3, 1, 1, bias=False), nn.Dropout(dropout), nn.BatchNorm2d(w[0]), nn.PReLU(w[0]))
        stages = []
        cin = w[0]
        for n_units, cout in zip(config.units, w):
            units = [BottleneckIR(cin, cout, 2, config.use_se, dropout)]
            units += [BottleneckIR(cout, cout, 1, config.use_se, dropout) for _ in range(n_units - 1)]
            stages.append(nn.Sequential(*units))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def set_dropout(self, p: float) -> None:
        for m in self.modules():
            if isinstance(m, nn.Dropout):
                m.p = p

    def first_conv_modules(self) -> nn.Module:
        return self.input_layer

    def forward(self, x):
        x = self.input_layer(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats
