"""Attention-masked super-resolution networks.

The model has two branches that are trained jointly:

* a feature reconstruction branch working at LR resolution (head conv,
  stacked DenseRes blocks, sub-pixel upsampler, tail conv) that predicts a
  3-channel residual field ``F`` at HR resolution;
* an attention branch, a U-shaped encoder/decoder with dense blocks, that
  reads the interpolated LR image and emits a 1-channel mask ``M`` in (0, 1).

The HR estimate is ``F * M + ILR`` with ``M`` broadcast over channels.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .nn import BatchNorm2d, Conv2d, ConvBNReLU, ConvTranspose2x2, Module, maxpool2x2, pixel_shuffle
from .tensor import ShapeError, Tensor, add, concat_channels, crop_spatial, mul


@dataclass
class ModelConfig:
    scale: int = 2
    base_channels: int = 64
    denseres_blocks: int = 6
    resblocks_per_block: int = 4
    attn_base_channels: int = 32
    attn_growth: int = 16
    attn_convs_per_dense_block: int = 3
    use_attention: bool = True

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ValueError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.denseres_blocks < 1 or self.resblocks_per_block < 1:
            raise ValueError("need at least one DenseRes block and one Resblock per block")
        for f in ("base_channels", "attn_base_channels", "attn_growth", "attn_convs_per_dense_block"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


class Resblock(Module):
    """conv -> BN -> ReLU -> conv -> BN, plus the identity skip."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, h: Tensor) -> Tensor:
        if h.shape[1] != self.conv1.in_ch:
            raise ShapeError(f"Resblock expects {self.conv1.in_ch} channels, got {h.shape[1]}")
        y = self.bn1(self.conv1(h)).relu()
        y = self.bn2(self.conv2(y))
        return add(y, h)


class DenseResBlock(Module):
    """Chain of Resblocks, each fed a 1x1-fused concatenation of everything before it.

    Fuser ``i`` (1-based) sees ``[g0, F_1, ..., F_{i-1}]``, i.e. ``i * C``
    channels, where ``g0`` is the block input.
    """

    def __init__(self, channels: int, n_res: int, rng: np.random.Generator):
        super().__init__()
        self.n_res = n_res
        for i in range(n_res):
            self.add_module(f"fuse{i + 1}", ConvBNReLU((i + 1) * channels, channels, 1, rng))
            self.add_module(f"res{i + 1}", Resblock(channels, rng))

    @property
    def fusers(self) -> List[ConvBNReLU]:
        return [getattr(self, f"fuse{i + 1}") for i in range(self.n_res)]

    @property
    def resblocks(self) -> List[Resblock]:
        return [getattr(self, f"res{i + 1}") for i in range(self.n_res)]

    def forward(self, g0: Tensor) -> Tensor:
        states = [g0]
        for fuse, res in zip(self.fusers, self.resblocks):
            h = fuse(concat_channels(states))
            states.append(res(h))
        return states[-1]


class FeatureNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.base_channels
        self.n_blocks = cfg.denseres_blocks
        self.head = Conv2d(3, c, 3, rng)
        for b in range(cfg.denseres_blocks):
            self.add_module(f"block{b + 1}", DenseResBlock(c, cfg.resblocks_per_block, rng))
            if b + 1 < cfg.denseres_blocks:
                self.add_module(f"trans{b + 1}", ConvBNReLU(c, c, 1, rng))
        # x4 is two cascaded x2 stages
        self.stages = [2, 2] if cfg.scale == 4 else [cfg.scale]
        for i, r in enumerate(self.stages):
            self.add_module(f"up{i + 1}", Conv2d(c, c * r * r, 3, rng))
        self.tail = Conv2d(c, 3, 3, rng)

    def forward(self, lr: Tensor) -> Tensor:
        if lr.ndim != 4 or lr.shape[1] != 3:
            raise ShapeError(f"feature branch expects (N,3,H,W), got {lr.shape}")
        x = self.head(lr)
        for b in range(self.n_blocks):
            x = getattr(self, f"block{b + 1}")(x)
            if b + 1 < self.n_blocks:
                x = getattr(self, f"trans{b + 1}")(x)
        for i, r in enumerate(self.stages):
            x = pixel_shuffle(getattr(self, f"up{i + 1}")(x), r)
        return self.tail(x)


class DenseBlock(Module):
    """DenseNet-style block: each conv sees the concat of the input and all earlier outputs.

    Output channels are ``in_ch + n_convs * growth``.
    """

    def __init__(self, in_ch: int, growth: int, n_convs: int, rng: np.random.Generator):
        super().__init__()
        self.n_convs = n_convs
        self.out_ch = in_ch + n_convs * growth
        for i in range(n_convs):
            self.add_module(f"layer{i + 1}", ConvBNReLU(in_ch + i * growth, growth, 3, rng))

    def forward(self, x: Tensor) -> Tensor:
        feats = [x]
        for i in range(self.n_convs):
            feats.append(getattr(self, f"layer{i + 1}")(concat_channels(feats)))
        return concat_channels(feats)


class AttentionNet(Module):
    """U-shaped mask generator: two poolings down, two transposed convs up, sigmoid out."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        g, n = cfg.attn_growth, cfg.attn_convs_per_dense_block
        self.stem = ConvBNReLU(3, cfg.attn_base_channels, 3, rng)
        self.enc1 = DenseBlock(cfg.attn_base_channels, g, n, rng)
        self.enc2 = DenseBlock(self.enc1.out_ch, g, n, rng)
        self.bottleneck = DenseBlock(self.enc2.out_ch, g, n, rng)
        self.up2 = ConvTranspose2x2(self.bottleneck.out_ch, self.enc2.out_ch, rng)
        self.dec2 = DenseBlock(2 * self.enc2.out_ch, g, n, rng)
        self.up1 = ConvTranspose2x2(self.dec2.out_ch, self.enc1.out_ch, rng)
        self.dec1 = DenseBlock(2 * self.enc1.out_ch, g, n, rng)
        self.out = Conv2d(self.dec1.out_ch, 1, 1, rng)

    def forward(self, ilr: Tensor) -> Tensor:
        h, w = ilr.shape[2:]
        if h % 4 or w % 4:
            raise ShapeError(f"attention branch needs extents divisible by 4, got {h}x{w}")
        s1 = self.enc1(self.stem(ilr))
        s2 = self.enc2(maxpool2x2(s1))
        b = self.bottleneck(maxpool2x2(s2))
        d2 = self.dec2(concat_channels([self.up2(b), s2]))
        d1 = self.dec1(concat_channels([self.up1(d2), s1]))
        return self.out(d1).sigmoid()


def compose(f: Tensor, m: Tensor, ilr: Tensor) -> Tensor:
    """HR = F * M + ILR, with the 1-channel mask broadcast over colour channels."""
    if f.shape != ilr.shape:
        raise ShapeError(f"residual {f.shape} and interpolated image {ilr.shape} differ")
    if m.shape != f.shape[:1] + (1,) + f.shape[2:]:
        raise ShapeError(f"mask shape {m.shape} does not match residual {f.shape}")
    return add(mul(f, m), ilr)


class AttnSRModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.feature = FeatureNet(cfg, rng)
        if cfg.use_attention:
            self.attention = AttentionNet(cfg, rng)
        self.assign_names()

    @property
    def scale(self) -> int:
        return self.config.scale

    def residual_and_mask(self, lr: Tensor, ilr: Tensor) -> Tuple[Tensor, Tensor]:
        r = self.scale
        if lr.ndim != 4 or ilr.ndim != 4 or ilr.shape[2] != r * lr.shape[2] or ilr.shape[3] != r * lr.shape[3]:
            raise ValueError(f"interpolated input {ilr.shape} is not x{r} of LR input {lr.shape}")
        f = self.feature(lr)
        if self.config.use_attention:
            m = self.attention(ilr)
        else:
            m = Tensor(np.ones(f.shape[:1] + (1,) + f.shape[2:], dtype=f.dtype))
        return f, m

    def forward(self, lr: Tensor, ilr: Tensor) -> Tuple[Tensor, Tensor]:
        """Return ``(hr, mask)``. Without attention the mask is all ones."""
        f, m = self.residual_and_mask(lr, ilr)
        return compose(f, m, ilr), m


def pad_amount(lr_extent: int, r: int) -> int:
    """Smallest LR padding making the HR extent a multiple of 4."""
    p = 0
    while (r * (lr_extent + p)) % 4:
        p += 1
    return p


def predict(model: AttnSRModel, lr: np.ndarray, ilr: np.ndarray, return_parts: bool = False):
    """Run a frozen forward pass on arrays of any size.

    ``lr`` (N,3,h,w) is zero-padded at the bottom/right and ``ilr``
    (N,3,rh,rw) reflect-padded by the corresponding HR amount so the
    attention branch sees extents divisible by 4; outputs are cropped back.
    Returns ``(hr, mask)`` or, with ``return_parts``, ``(hr, mask, residual)``.
    """
    r = model.scale
    n, _, h, w = lr.shape
    ph, pw = pad_amount(h, r), pad_amount(w, r)
    if ph or pw:
        lr = np.pad(lr, ((0, 0), (0, 0), (0, ph), (0, pw)))
        ilr = np.pad(ilr, ((0, 0), (0, 0), (0, r * ph), (0, r * pw)), mode="reflect")
    lr_t, ilr_t = Tensor(lr), Tensor(ilr)
    was_training = model.training
    model.eval()
    try:
        f, m = model.residual_and_mask(lr_t, ilr_t)
        hr = compose(f, m, ilr_t)
    finally:
        model.train(was_training)
    H, W = r * h, r * w
    out = [crop_spatial(t, H, W).data for t in (hr, m)]
    if return_parts:
        out.append(crop_spatial(f, H, W).data)
    return tuple(out)


def count_parameters(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def zero_tail(model: AttnSRModel) -> None:
    """Zero the final feature conv so the residual field vanishes."""
    model.feature.tail.weight.data[...] = 0
    model.feature.tail.bias.data[...] = 0


__all__ = [
    "AttentionNet",
    "AttnSRModel",
    "DenseBlock",
    "DenseResBlock",
    "FeatureNet",
    "ModelConfig",
    "Resblock",
    "compose",
    "count_parameters",
    "pad_amount",
    "predict",
    "zero_tail",
]
