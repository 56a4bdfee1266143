"""Denoising generator, critic, and frozen perceptual feature extractor.

The generator is a three-level encoder/decoder with skip concatenations:
a 1x1 input conv to 8 channels, three [conv3x3 x2 -> maxpool] stages
widening 32 -> 64 -> 128, a 128-channel bottleneck at 1/8 resolution,
three [bilinear 2x upsample -> concat skip -> convs] stages narrowing
64 -> 32 -> 16, and a linear 1x1 conv to one channel.  ReLU follows every
conv except the output head; zero padding everywhere; no normalization
layers.

The critic stacks six 3x3 convs (stride pattern 1,2,1,2,1,2), global
average pooling, and two fully-connected layers to a single unbounded
score (leaky-ReLU 0.2, no sigmoid), so it accepts any input size with
H, W >= 8.

The feature extractor is frozen: gradients flow through it to its input
but never into its own tensors.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    ConfigurationError,
    InvalidSpecError,
    LookupTagError,
    ShapeError,
)
from .recon import SliceImage

EXTRACTOR_KINDS = ("pretrained_vgg", "identity", "gaussian_pyramid")
VGG_COUNT_MODES = ("weight_layers", "all_layers")

# VGG-19 conv plan: (name, in_ch, out_ch), with "pool" rows marking 2x2
# max-pools.  Truncations below take prefixes of this list.
_VGG_PLAN = [
    ("conv1_1", 3, 64), ("conv1_2", 64, 64), "pool",
    ("conv2_1", 64, 128), ("conv2_2", 128, 128), "pool",
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256), ("conv3_4", 256, 256),
    "pool",
    ("conv4_1", 256, 512), ("conv4_2", 512, 512), ("conv4_3", 512, 512), ("conv4_4", 512, 512),
    "pool",
    ("conv5_1", 512, 512), ("conv5_2", 512, 512), ("conv5_3", 512, 512), ("conv5_4", 512, 512),
]

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class SliceStack:
    """d adjacent low-dose slices centered on the target index."""

    data: np.ndarray
    center_index: int

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InvalidSpecError(f"stack must be 3D (d, H, W), got {self.data.ndim}D")
        if self.data.shape[0] % 2 != 1:
            raise InvalidSpecError(f"stack depth must be odd, got {self.data.shape[0]}")

    @property
    def d(self) -> int:
        return self.data.shape[0]


def _he_init(module: nn.Module, seed: int):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
                if m.bias is not None:
                    m.bias.zero_()


def _check_multiple_of_8(h: int, w: int):
    for name, v in (("height", h), ("width", w)):
        if v % 8 != 0:
            raise ShapeError(f"{name} {v} is not a multiple of 8")


class Generator(nn.Module):
    # channel width at each tap, as a multiple of base_channels (input
    # depends on d, output is always 1)
    TAP_WIDTH_FACTORS = {
        "in_conv": 1, "down1": 4, "down2": 8, "down3": 16,
        "bottleneck": 16, "up1": 8, "up2": 4, "head": 2,
    }

    def __init__(self, d: int, base_channels: int = 8):
        super().__init__()
        if d % 2 != 1 or d < 1:
            raise InvalidSpecError(f"generator depth must be odd and >= 1, got {d}")
        if base_channels < 1:
            raise InvalidSpecError(f"base_channels must be >= 1, got {base_channels}")
        self.d = d
        self.base_channels = base_channels
        bc = base_channels
        w1, w2, w3 = 4 * bc, 8 * bc, 16 * bc
        self.in_conv = nn.Conv2d(d, bc, 1)
        self.down1_a = nn.Conv2d(bc, w1, 3, padding=1)
        self.down1_b = nn.Conv2d(w1, w1, 3, padding=1)
        self.down2_a = nn.Conv2d(w1, w2, 3, padding=1)
        self.down2_b = nn.Conv2d(w2, w2, 3, padding=1)
        self.down3_a = nn.Conv2d(w2, w3, 3, padding=1)
        self.down3_b = nn.Conv2d(w3, w3, 3, padding=1)
        self.bottleneck = nn.Conv2d(w3, w3, 3, padding=1)
        self.up1_a = nn.Conv2d(2 * w3, w2, 3, padding=1)
        self.up1_b = nn.Conv2d(w2, w2, 3, padding=1)
        self.up2_a = nn.Conv2d(2 * w2, w1, 3, padding=1)
        self.up2_b = nn.Conv2d(w1, w1, 3, padding=1)
        self.head_a = nn.Conv2d(2 * w1, 2 * bc, 3, padding=1)
        self.head_b = nn.Conv2d(2 * bc, 1, 1)  # linear output

    @staticmethod
    def _up(x):
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x, taps: dict | None = None):
        if x.ndim != 4:
            raise ShapeError(f"expected (N, d, H, W) input, got {tuple(x.shape)}")
        if x.shape[1] != self.d:
            raise ShapeError(f"stack depth {x.shape[1]} does not match generator depth {self.d}")
        _check_multiple_of_8(x.shape[2], x.shape[3])
        t = F.relu(self.in_conv(x))
        s1 = F.relu(self.down1_b(F.relu(self.down1_a(t))))
        s2 = F.relu(self.down2_b(F.relu(self.down2_a(F.max_pool2d(s1, 2)))))
        s3 = F.relu(self.down3_b(F.relu(self.down3_a(F.max_pool2d(s2, 2)))))
        bn = F.relu(self.bottleneck(F.max_pool2d(s3, 2)))
        u1 = F.relu(self.up1_b(F.relu(self.up1_a(torch.cat([self._up(bn), s3], dim=1)))))
        u2 = F.relu(self.up2_b(F.relu(self.up2_a(torch.cat([self._up(u1), s2], dim=1)))))
        h = F.relu(self.head_a(torch.cat([self._up(u2), s1], dim=1)))
        out = self.head_b(h)
        if taps is not None:
            taps.update(
                input=x, in_conv=t, down1=s1, down2=s2, down3=s3,
                bottleneck=bn, up1=u1, up2=u2, head=h, output=out,
            )
        return out

    def tap_channels(self) -> dict:
        """Channel count at every named tap of the layer graph."""
        table = {"input": self.d, "output": 1}
        for tag, factor in self.TAP_WIDTH_FACTORS.items():
            table[tag] = factor * self.base_channels
        return table


class Discriminator(nn.Module):
    # (out_channels, stride) per conv; the three stride-2 layers give the
    # 256 -> 256 -> 128 -> 128 -> 64 -> 64 -> 32 spatial ladder
    CONV_PLAN = [(64, 1), (64, 2), (128, 1), (128, 2), (256, 1), (4, 2)]
    LEAKY_SLOPE = 0.2

    def __init__(self):
        super().__init__()
        convs = []
        in_ch = 1
        for out_ch, stride in self.CONV_PLAN:
            convs.append(nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.fc_hidden = nn.Linear(4, 64)
        self.fc_out = nn.Linear(64, 1)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"expected (N, 1, H, W) input, got {tuple(x.shape)}")
        if x.shape[1] != 1:
            raise ShapeError(f"discriminator takes single-channel images, got {x.shape[1]}")
        if x.shape[2] < 8 or x.shape[3] < 8:
            raise ShapeError(f"spatial dims must be >= 8, got {tuple(x.shape[2:])}")
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.LEAKY_SLOPE)
        x = x.mean(dim=(2, 3))  # global average pool keeps any H x W valid
        x = F.leaky_relu(self.fc_hidden(x), self.LEAKY_SLOPE)
        return self.fc_out(x).squeeze(1)


class FeatureExtractor(nn.Module):
    """Frozen feature network for the perceptual loss."""

    def __init__(self, kind: str, convs=None, plan=None, input_scale: float = 1.0):
        super().__init__()
        if kind not in EXTRACTOR_KINDS:
            raise InvalidSpecError(f"extractor kind must be one of {EXTRACTOR_KINDS}, got {kind!r}")
        self.kind = kind
        self.plan = plan
        if kind == "pretrained_vgg":
            self.convs = convs
            self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
            self.register_buffer("input_scale", torch.tensor(float(input_scale)))
        elif kind == "gaussian_pyramid":
            for i, sigma in enumerate((1.0, 2.0, 4.0)):
                half = int(3 * sigma)
                x = torch.arange(-half, half + 1, dtype=torch.float32)
                g1 = torch.exp(-(x**2) / (2 * sigma**2))
                g1 = g1 / g1.sum()
                self.register_buffer(f"kernel{i}", (g1[:, None] * g1[None, :])[None, None])
        for p in self.parameters():
            p.requires_grad_(False)

    def downsample_factor(self) -> int:
        if self.kind != "pretrained_vgg":
            return 1
        return 2 ** sum(1 for row in self.plan if row == "pool")

    def out_channels(self) -> int:
        if self.kind == "identity":
            return 1
        if self.kind == "gaussian_pyramid":
            return 3
        return next(row[2] for row in reversed(self.plan) if row != "pool")

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (N, 1, H, W) input, got {tuple(x.shape)}")
        if self.kind == "identity":
            return x
        if self.kind == "gaussian_pyramid":
            levels = []
            for i in range(3):
                k = getattr(self, f"kernel{i}").to(x.dtype)
                levels.append(F.conv2d(x, k, padding=k.shape[-1] // 2))
            return torch.cat(levels, dim=1)
        t = (x * self.input_scale).repeat(1, 3, 1, 1)
        t = (t - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        ci = 0
        for row in self.plan:
            if row == "pool":
                t = F.max_pool2d(t, 2)
            else:
                t = F.relu(self.convs[ci](t))
                ci += 1
        return t


def build_generator(d: int, base_channels: int = 8, seed: int = 0) -> Generator:
    """Construct and He-initialize the generator for depth-d stacks."""
    g = Generator(d, base_channels)
    _he_init(g, seed)
    return g


def build_discriminator(seed: int = 0) -> Discriminator:
    disc = Discriminator()
    _he_init(disc, seed)
    return disc


def _vgg_truncation(count_mode: str):
    if count_mode not in VGG_COUNT_MODES:
        raise InvalidSpecError(f"count_mode must be one of {VGG_COUNT_MODES}, got {count_mode!r}")
    if count_mode == "weight_layers":
        # first 16 convolution layers: everything through conv5_4
        return _VGG_PLAN
    # first 16 nn layers counting conv/relu/pool: ends after conv3_3's relu
    plan = []
    n_layers = 0
    for row in _VGG_PLAN:
        cost = 1 if row == "pool" else 2  # conv counts with its relu
        if n_layers + cost > 16:
            break
        plan.append(row)
        n_layers += cost
    return plan


def build_feature_extractor(
    kind: str,
    weights_path=None,
    count_mode: str = "weight_layers",
    input_scale: float = 1.0,
) -> FeatureExtractor:
    """Build the frozen extractor; pretrained_vgg requires a weights file.

    The weights file is a named-tensor checkpoint produced by
    ``python -m tomodenoise.vgg_import``; without it, the identity and
    gaussian_pyramid kinds work out of the box.
    """
    if kind != "pretrained_vgg":
        return FeatureExtractor(kind)
    plan = _vgg_truncation(count_mode)
    if weights_path is None:
        raise ConfigurationError(
            "pretrained_vgg needs a weights file (run python -m tomodenoise.vgg_import); "
            "extractor kinds 'identity' and 'gaussian_pyramid' work without one"
        )
    from . import formats  # deferred: avoids an import cycle with the I/O layer

    tensors, _meta = formats.load_tensors(weights_path)
    convs = []
    for row in plan:
        if row == "pool":
            continue
        name, in_ch, out_ch = row
        conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        for part, shape in (("weight", (out_ch, in_ch, 3, 3)), ("bias", (out_ch,))):
            key = f"{name}.{part}"
            if key not in tensors:
                raise ConfigurationError(
                    f"weights file is missing tensor {key}; re-run the import script"
                )
            arr = tensors[key]
            if tuple(arr.shape) != shape:
                raise ConfigurationError(f"tensor {key} has shape {arr.shape}, expected {shape}")
            with torch.no_grad():
                getattr(conv, part).copy_(torch.from_numpy(arr))
        convs.append(conv)
    return FeatureExtractor(
        "pretrained_vgg", convs=nn.ModuleList(convs), plan=plan, input_scale=input_scale
    )


def _stack_to_batch(params: Generator, stack: SliceStack, pad: bool):
    if stack.d != params.d:
        raise ShapeError(f"stack depth {stack.d} does not match generator depth {params.d}")
    data = np.asarray(stack.data, dtype=np.float32)
    _, h, w = data.shape
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    if (pad_h or pad_w) and not pad:
        _check_multiple_of_8(h, w)
    if pad_h or pad_w:
        data = np.pad(data, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    return torch.from_numpy(data).unsqueeze(0), h, w


def generator_forward(params: Generator, stack: SliceStack, pad: bool = False) -> SliceImage:
    """Denoise the center slice of a low-dose stack.

    With ``pad`` enabled, inputs whose sides are not multiples of 8 are
    edge-replicated up to the next multiple and the output is cropped back.
    """
    batch, h, w = _stack_to_batch(params, stack, pad)
    with torch.no_grad():
        out = params(batch)
    img = out[0, 0, :h, :w].numpy()
    return SliceImage(img, provenance="denoised", slice_index=stack.center_index)


def discriminator_forward(params: Discriminator, image) -> float:
    """Score one image; unbounded real output."""
    data = np.asarray(getattr(image, "data", image), dtype=np.float32)
    if data.ndim != 2:
        raise ShapeError(f"expected a single 2D image, got shape {data.shape}")
    with torch.no_grad():
        score = params(torch.from_numpy(data)[None, None])
    return float(score[0])


def feature_extract(params: FeatureExtractor, image) -> np.ndarray:
    """Frozen feature maps of one image, shape (C_f, H_f, W_f)."""
    data = np.asarray(getattr(image, "data", image), dtype=np.float32)
    if data.ndim != 2:
        raise ShapeError(f"expected a single 2D image, got shape {data.shape}")
    with torch.no_grad():
        out = params(torch.from_numpy(data)[None, None])
    return out[0].numpy()


def extract_feature_maps(params: Generator, stack: SliceStack, layer_tag: str = "bottleneck"):
    """Per-channel activation images at one generator graph node."""
    table = params.tap_channels()
    if layer_tag not in table:
        raise LookupTagError(
            f"unknown layer tag {layer_tag!r}; valid tags: {', '.join(sorted(table))}"
        )
    batch, h, w = _stack_to_batch(params, stack, pad=True)
    taps: dict = {}
    with torch.no_grad():
        params(batch, taps=taps)
    maps = taps[layer_tag][0].numpy()
    assert maps.shape[0] == table[layer_tag]
    return [maps[c] for c in range(maps.shape[0])]
