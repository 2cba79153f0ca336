"""Gaze regressor, domain discriminators and the importance-weighted feature stack.

Regressor (input 1x35x55, 3x3 convs with stride 1 and no padding)::

    C1  1->32    33x53      C4  64->80    12x22
    C2  32->32   31x51      C5  80->192   10x20
    C3  32->64   29x49      P2  2x2/2     5x10     -> flatten 9600
    P1  3x3/2    14x24      FC1 9600->9600, FC2 9600->1000, FC3 1000->3

Leaky ReLU (0.2) follows every layer except FC3, whose output is L2
normalised. Layers C1..FC1 form the feature block, FC2/FC3 the regression
block.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ArchitectureError, ConfigurationError, DegenerateVectorError, ShapeError

INPUT_SHAPE = (35, 55)
FC1_DIM = 9600
FC1_GRID = (192, 5, 10)
LEAK = 0.2
CONV_TAPS = ("C1", "C2", "C3", "C4", "C5")
TAP_NAMES = CONV_TAPS + ("FC1",)
FEATURE_LAYERS = ("c1", "c2", "c3", "c4", "c5", "fc1")
REGRESSION_LAYERS = ("fc2", "fc3")
_CONV_CHANNELS = {"C1": 32, "C2": 32, "C3": 64, "C4": 80, "C5": 192, "FC1": FC1_GRID[0]}
NORM_EPS = 1e-12


def _conv_out(n, k, stride=1, pad=0):
    return (n + 2 * pad - k) // stride + 1


def regressor_shape_trace(padding: int = 0, input_shape=INPUT_SHAPE) -> dict:
    """Spatial size after every layer, computed without building tensors."""
    h, w = input_shape
    trace = {}
    for name in ("C1", "C2", "C3"):
        h, w = _conv_out(h, 3, 1, padding), _conv_out(w, 3, 1, padding)
        trace[name] = (h, w)
    h, w = _conv_out(h, 3, 2), _conv_out(w, 3, 2)
    trace["P1"] = (h, w)
    for name in ("C4", "C5"):
        h, w = _conv_out(h, 3, 1, padding), _conv_out(w, 3, 1, padding)
        trace[name] = (h, w)
    h, w = _conv_out(h, 2, 2), _conv_out(w, 2, 2)
    trace["P2"] = (h, w)
    trace["flat"] = 192 * h * w
    return trace


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            nn.init.zeros_(m.bias)


def unit_normalize(v: torch.Tensor) -> torch.Tensor:
    norms = v.norm(dim=-1, keepdim=True)
    if bool((norms <= NORM_EPS).any()):
        raise DegenerateVectorError("cannot normalise a zero-length gaze prediction")
    return v / norms


class GazeRegressor(nn.Module):
    """The gaze regression network; also serves as the parameter store.

    ``frozen`` marks a store whose tensors must never change again; freezing
    also turns off ``requires_grad`` so no optimizer can pick them up.
    """

    def __init__(self, padding: int = 0, init_std: float = 0.02):
        super().__init__()
        trace = regressor_shape_trace(padding)
        if trace["flat"] != FC1_DIM:
            raise ArchitectureError(
                f"padding={padding} gives an FC1 input of {trace['flat']}, expected {FC1_DIM}")
        self.padding = padding
        self.c1 = nn.Conv2d(1, 32, 3, padding=padding)
        self.c2 = nn.Conv2d(32, 32, 3, padding=padding)
        self.c3 = nn.Conv2d(32, 64, 3, padding=padding)
        self.c4 = nn.Conv2d(64, 80, 3, padding=padding)
        self.c5 = nn.Conv2d(80, 192, 3, padding=padding)
        self.fc1 = nn.Linear(FC1_DIM, FC1_DIM)
        self.fc2 = nn.Linear(FC1_DIM, 1000)
        self.fc3 = nn.Linear(1000, 3)
        self.frozen = False
        init_weights(self, init_std)

    # -- partition ------------------------------------------------------
    def feature_parameters(self):
        return [p for n, p in self.named_parameters() if n.split(".")[0] in FEATURE_LAYERS]

    def regression_parameters(self):
        return [p for n, p in self.named_parameters() if n.split(".")[0] in REGRESSION_LAYERS]

    def partition(self) -> dict[str, list[str]]:
        names = [n for n, _ in self.named_parameters()]
        return {"feature": [n for n in names if n.split(".")[0] in FEATURE_LAYERS],
                "regression": [n for n in names if n.split(".")[0] in REGRESSION_LAYERS]}

    def freeze(self) -> "GazeRegressor":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def fingerprint(self) -> str:
        return architecture_fingerprint(self)

    # -- forward ----------------------------------------------------------
    def features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Post-activation taps C1..C5 and FC1 (FC1 as a flat 9600 vector)."""
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if x.dim() != 4 or tuple(x.shape[1:]) != (1, *INPUT_SHAPE):
            raise ShapeError(f"expected a batch of 1x35x55 images, got {tuple(x.shape)}")
        act = lambda t: F.leaky_relu(t, LEAK)
        taps = {}
        h = taps["C1"] = act(self.c1(x))
        h = taps["C2"] = act(self.c2(h))
        h = taps["C3"] = act(self.c3(h))
        h = F.max_pool2d(h, 3, 2)
        h = taps["C4"] = act(self.c4(h))
        h = taps["C5"] = act(self.c5(h))
        h = F.max_pool2d(h, 2, 2)
        taps["FC1"] = act(self.fc1(h.flatten(1)))
        return taps

    def regress_raw(self, fc1: torch.Tensor) -> torch.Tensor:
        """FC2 -> FC3 without the final normalisation."""
        return self.fc3(F.leaky_relu(self.fc2(fc1), LEAK))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return unit_normalize(self.regress_raw(self.features(x)["FC1"]))


def forward_regressor(params: GazeRegressor, images) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Unit gaze predictions plus the activation taps."""
    x = torch.as_tensor(images, dtype=torch.float32)
    taps = params.features(x)
    return unit_normalize(params.regress_raw(taps["FC1"])), taps


def architecture_fingerprint(module: nn.Module) -> str:
    desc = ";".join(f"{n}:{tuple(p.shape)}" for n, p in module.state_dict().items())
    desc += f";padding={getattr(module, 'padding', 0)}"
    return hashlib.sha256(desc.encode()).hexdigest()[:16]


def init_target_from_source(source: GazeRegressor) -> GazeRegressor:
    """Deep copy of ``source`` as a trainable target; ``source`` is frozen."""
    target = copy.deepcopy(source)
    for p in target.parameters():
        p.requires_grad_(True)
    target.frozen = False
    target.train()
    source.freeze()
    return target


# -- feature selection and stacking -----------------------------------------

@dataclass(frozen=True)
class FeatureSelection:
    taps: tuple[str, ...]
    include_fc1: bool = True

    def __post_init__(self):
        taps = tuple(self.taps)
        object.__setattr__(self, "taps", taps)
        if len(taps) not in (1, 2):
            raise ConfigurationError(f"1 or 2 conv taps supported, got {len(taps)}")
        bad = [t for t in taps if t not in CONV_TAPS]
        if bad or len(set(taps)) != len(taps):
            raise ConfigurationError(f"invalid tap selection {taps}")

    @classmethod
    def parse(cls, name: str, include_fc1: bool = True) -> "FeatureSelection":
        """``"C3C5"`` -> taps (C3, C5)."""
        s = name.strip().upper().replace("+FC1", "")
        parts = [f"C{d}" for d in s.replace("C", " ").split()]
        if "".join(parts) != s:
            raise ConfigurationError(f"cannot parse selection {name!r}")
        return cls(tuple(parts), include_fc1)

    @property
    def name(self) -> str:
        return "".join(self.taps)

    @property
    def arity(self) -> int:
        return len(self.taps)

    @property
    def all_taps(self) -> tuple[str, ...]:
        return self.taps + (("FC1",) if self.include_fc1 else ())

    @property
    def k(self) -> int:
        return len(self.all_taps)


def single_level_grid() -> list[FeatureSelection]:
    return [FeatureSelection((t,)) for t in CONV_TAPS]


def double_level_grid() -> list[FeatureSelection]:
    return [FeatureSelection(pair) for pair in itertools.combinations(CONV_TAPS, 2)]


class ImportanceVector(nn.Module):
    """One learnable scalar per tap, initialised to 1 and left unconstrained."""

    def __init__(self, k: int, trainable: bool = True):
        super().__init__()
        self.values = nn.Parameter(torch.ones(k), requires_grad=trainable)

    def __len__(self):
        return self.values.numel()


@dataclass
class FeatureStack:
    data: torch.Tensor
    provenance: list[tuple[str, int, int]] = field(default_factory=list)
    """(tap, start, stop) along the channel axis (2D) or depth axis (3D)."""

    @property
    def volumetric(self) -> bool:
        return self.data.dim() == 5


def tap_grid(name: str, t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], *FC1_GRID) if name == "FC1" else t


def stack_geometry(selection: FeatureSelection) -> tuple[tuple[int, int], int, int]:
    """Target spatial size, channel count and depth of the stack for ``selection``."""
    sizes = {**{k: v for k, v in regressor_shape_trace().items() if k in CONV_TAPS},
             "FC1": FC1_GRID[1:]}
    taps = selection.all_taps
    hw = max((sizes[t] for t in taps), key=lambda s: s[0] * s[1])
    if selection.arity == 1:
        return hw, sum(_CONV_CHANNELS[t] for t in taps), 1
    return hw, max(_CONV_CHANNELS[t] for t in taps), len(taps)


def assemble_feature_stack(taps: dict[str, torch.Tensor], selection: FeatureSelection,
                           importance=None) -> FeatureStack:
    """Resize selected taps to the largest one, weight each by its importance, concatenate.

    One conv tap gives a (N, C, H, W) stack concatenated along channels. Two
    conv taps give a (N, C, D, H, W) volume with one depth slice per tap;
    slices with fewer channels are zero padded to the widest tap.
    """
    names = selection.all_taps
    if importance is not None:
        values = importance.values if isinstance(importance, ImportanceVector) else torch.as_tensor(importance)
        if values.numel() != len(names):
            raise ConfigurationError(
                f"importance has {values.numel()} entries, selection has {len(names)} taps")
    grids = [tap_grid(n, taps[n]) for n in names]
    hw = max((tuple(g.shape[-2:]) for g in grids), key=lambda s: s[0] * s[1])
    blocks = []
    for i, g in enumerate(grids):
        if tuple(g.shape[-2:]) != hw:
            g = F.interpolate(g, size=hw, mode="bilinear", align_corners=False)
        if importance is not None:
            g = g * values[i]
        blocks.append(g)
    prov = []
    if selection.arity == 1:
        start = 0
        for n, b in zip(names, blocks):
            prov.append((n, start, start + b.shape[1]))
            start += b.shape[1]
        return FeatureStack(torch.cat(blocks, dim=1), prov)
    width = max(b.shape[1] for b in blocks)
    blocks = [F.pad(b, (0, 0, 0, 0, 0, width - b.shape[1])) if b.shape[1] < width else b
              for b in blocks]
    prov = [(n, i, i + 1) for i, n in enumerate(names)]
    return FeatureStack(torch.stack(blocks, dim=2), prov)


# -- discriminators -----------------------------------------------------------

DISC_CHANNELS = (16, 32, 64)
MIN_DISC_SIZE = 9  # every stride-2 stage must see at least a 3x3 window


def _halved(n: int, times: int = 3) -> int:
    for _ in range(times):
        n = (n + 1) // 2
    return n


def _check_disc_size(hw) -> None:
    if min(hw) < MIN_DISC_SIZE:
        raise ConfigurationError(
            f"feature map {hw[0]}x{hw[1]} too small for three stride-2 stages; "
            f"minimum size is {MIN_DISC_SIZE}x{MIN_DISC_SIZE}")


class Discriminator2D(nn.Module):
    """Three 3x3 stride-2 'same' convs (16-32-64), dropout, one output unit."""

    def __init__(self, in_channels: int, hw, mode: str = "gan", conv_dropout=0.25, fc_dropout=0.5):
        super().__init__()
        _check_disc_size(hw)
        if mode not in ("gan", "wgan"):
            raise ConfigurationError(f"unknown adversarial mode {mode!r}")
        self.mode = mode
        chans = (in_channels,) + DISC_CHANNELS
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1)
                                   for a, b in zip(chans, chans[1:]))
        self.conv_drop = nn.Dropout(conv_dropout)
        self.fc_drop = nn.Dropout(fc_dropout)
        self.fc = nn.Linear(DISC_CHANNELS[-1] * _halved(hw[0]) * _halved(hw[1]), 1)
        init_weights(self)

    def forward(self, stack) -> torch.Tensor:
        h = stack.data if isinstance(stack, FeatureStack) else stack
        if h.dim() != 4:
            raise ShapeError(f"2D discriminator expects (N, C, H, W), got {tuple(h.shape)}")
        for conv in self.convs:
            h = self.conv_drop(F.leaky_relu(conv(h), LEAK))
        out = self.fc(self.fc_drop(h.flatten(1))).squeeze(1)
        return torch.sigmoid(out) if self.mode == "gan" else out


class Discriminator3D(nn.Module):
    """3x3x3 convs with stride (1, 2, 2) so the tap (depth) axis is preserved."""

    def __init__(self, in_channels: int, depth: int, hw, mode: str = "gan",
                 conv_dropout=0.25, fc_dropout=0.5):
        super().__init__()
        _check_disc_size(hw)
        if mode not in ("gan", "wgan"):
            raise ConfigurationError(f"unknown adversarial mode {mode!r}")
        self.mode = mode
        chans = (in_channels,) + DISC_CHANNELS
        self.convs = nn.ModuleList(nn.Conv3d(a, b, 3, stride=(1, 2, 2), padding=1)
                                   for a, b in zip(chans, chans[1:]))
        self.conv_drop = nn.Dropout(conv_dropout)
        self.fc_drop = nn.Dropout(fc_dropout)
        self.fc = nn.Linear(DISC_CHANNELS[-1] * depth * _halved(hw[0]) * _halved(hw[1]), 1)
        init_weights(self)

    def forward(self, stack) -> torch.Tensor:
        h = stack.data if isinstance(stack, FeatureStack) else stack
        if h.dim() != 5:
            raise ShapeError(f"3D discriminator expects (N, C, D, H, W), got {tuple(h.shape)}")
        for conv in self.convs:
            h = self.conv_drop(F.leaky_relu(conv(h), LEAK))
        out = self.fc(self.fc_drop(h.flatten(1))).squeeze(1)
        return torch.sigmoid(out) if self.mode == "gan" else out


def build_discriminator(selection: FeatureSelection, mode: str = "gan") -> nn.Module:
    hw, channels, depth = stack_geometry(selection)
    if selection.arity == 1:
        return Discriminator2D(channels, hw, mode)
    return Discriminator3D(channels, depth, hw, mode)


def forward_discriminator_2d(params: Discriminator2D, stack) -> torch.Tensor:
    return params(stack)


def forward_discriminator_3d(params: Discriminator3D, stack) -> torch.Tensor:
    return params(stack)
