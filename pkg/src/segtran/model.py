"""The segmentation pipeline: conv backbone, bottom-up feature fusion,
flattened transformer stage, and a per-pixel classification head.

Spatial scales relative to the H x W input, asserted on every forward:

    f1 1/2   f2 1/4   f3 1/8   f4 1/16     backbone stages
    f34 1/8                                fused transformer input
    g34 1/8                                transformer output (or f34 when
                                           the stack is bypassed)
    f12 1/2  g1234 1/2                     fused decoder features
    logits 1/1                             K channels at input resolution

The transformer sees N = (H/8)*(W/8) units of width C = channels[-1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as at
from . import autodiff as ad
from . import pe as pe_mod
from .autodiff import Tensor
from .config import SegtranConfig
from .errors import ConfigError, ShapeError
from .params import ParamStore


@dataclass
class ConvUnit:
    w: Tensor
    b: Tensor
    stride: int = 1
    pad: int = 0


def _conv(x: Tensor, unit: ConvUnit) -> Tensor:
    out = ad.conv2d(x, unit.w, stride=unit.stride, pad=unit.pad)
    cout = unit.w.shape[0]
    return out + ad.reshape(unit.b, (cout, 1, 1))


def _build_conv(store: ParamStore, name: str, cin: int, cout: int, k: int,
                stride: int, pad: int) -> ConvUnit:
    fan_in = cin * k * k
    return ConvUnit(
        w=store.fan_in_uniform(f"{name}.w", (cout, cin, k, k), fan_in),
        b=store.fan_in_uniform(f"{name}.b", (cout,), fan_in),
        stride=stride, pad=pad,
    )


@dataclass
class BackboneParams:
    stages: list[tuple[ConvUnit, ConvUnit]] = field(default_factory=list)


def build_backbone(store: ParamStore, in_channels: int,
                   widths: tuple[int, ...]) -> BackboneParams:
    bb = BackboneParams()
    cin = in_channels
    for i, cout in enumerate(widths, start=1):
        a = _build_conv(store, f"backbone.stage{i}.a", cin, cout, 3, 2, 1)
        b = _build_conv(store, f"backbone.stage{i}.b", cout, cout, 3, 1, 1)
        bb.stages.append((a, b))
        cin = cout
    return bb


def backbone_forward(image: Tensor, bb: BackboneParams) -> list[Tensor]:
    """Four feature maps at scales 1/2, 1/4, 1/8, 1/16."""
    h, w = image.shape[-2], image.shape[-1]
    for extent, name in ((h, "height"), (w, "width")):
        if extent % 16 != 0:
            raise ConfigError(f"input {name} {extent} is not divisible by 16")
    feats = []
    x = image
    for a, b in bb.stages:
        x = ad.silu(_conv(x, a))
        x = ad.silu(_conv(x, b))
        feats.append(x)
    return feats


class SegtranModel:
    """Parameters plus forward logic for one configuration."""

    def __init__(self, cfg: SegtranConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store
        c1, c2, c3, c4 = cfg.channels
        C = cfg.width
        K = cfg.classes
        self.backbone = build_backbone(store, cfg.in_channels, cfg.channels)
        self.conv34 = _build_conv(store, "fpn.conv34", c3, C, 1, 1, 0)
        if not cfg.cnn_only:
            self.pe = pe_mod.build_pe(store, cfg.pe, C, cfg.grid)
            self.layers = self._build_stack(store, C)
        else:
            self.pe = None
            self.layers = []
        self.conv12 = _build_conv(store, "fpn.conv12", c1, c2, 1, 1, 0)
        self.conv24 = _build_conv(store, "fpn.conv24", c2, C, 1, 1, 0)
        self.head = _build_conv(store, "head", C, K, 1, 1, 0)

    def _build_stack(self, store: ParamStore, C: int) -> list[at.LayerParams]:
        cfg = self.cfg
        layers: list[at.LayerParams] = []
        for i in range(cfg.layers):
            prefix = f"transformer.layer{i}"
            if cfg.transformer == "squeeze_expand":
                layers.append(at.build_sab(store, prefix, C, cfg.modes,
                                           cfg.codebook, cfg.ffn_mult,
                                           cfg.layernorm))
            elif cfg.transformer == "squeeze_single":
                layers.append(at.build_sab(store, prefix, C, 1, cfg.codebook,
                                           cfg.ffn_mult, cfg.layernorm))
            elif cfg.transformer == "expand_only":
                layers.append(at.build_eab(store, prefix, C, cfg.modes,
                                           cfg.ffn_mult, cfg.layernorm))
            else:  # mha
                layers.append(at.build_mha(store, prefix, C, cfg.heads,
                                           cfg.ffn_mult, cfg.layernorm))
        return layers

    # -- pipeline pieces, also usable standalone ---------------------------

    def input_fpn(self, f3: Tensor, f4: Tensor) -> Tensor:
        return ad.upsample_bilinear(f4, 2) + _conv(f3, self.conv34)

    def flatten_with_pe(self, f34: Tensor) -> Tensor:
        gh, gw = f34.shape[-2], f34.shape[-1]
        C = f34.shape[-3]
        lead = f34.shape[:-3]
        x = ad.transpose2(ad.reshape(f34, lead + (C, gh * gw)))  # [..., N, C]
        if self.pe is None or self.pe.tag == "none":
            return x
        return x + self.pe.encode(gh, gw)

    def unflatten(self, x: Tensor, gh: int, gw: int) -> Tensor:
        lead = x.shape[:-2]
        C = x.shape[-1]
        return ad.reshape(ad.transpose2(x), lead + (C, gh, gw))

    def output_fpn(self, f1: Tensor, f2: Tensor, g34: Tensor) -> Tensor:
        f12 = ad.upsample_bilinear(f2, 2) + _conv(f1, self.conv12)
        return ad.upsample_bilinear(g34, 4) + _conv(f12, self.conv24)

    def seg_head(self, g1234: Tensor) -> Tensor:
        return ad.upsample_bilinear(_conv(g1234, self.head), 2)

    def forward(self, image: Tensor) -> Tensor:
        """[.., D, H, W] image to [.., K, H, W] logits."""
        h, w = image.shape[-2], image.shape[-1]
        if (h, w) != (self.cfg.image_size, self.cfg.image_size):
            raise ConfigError(f"model was built for "
                              f"{self.cfg.image_size}x{self.cfg.image_size} "
                              f"inputs, got {h}x{w}")
        f1, f2, f3, f4 = backbone_forward(image, self.backbone)
        for i, f in enumerate((f1, f2, f3, f4), start=1):
            _expect_scale(f, (h, w), 2 ** i, f"f{i}")
        f34 = self.input_fpn(f3, f4)
        _expect_scale(f34, (h, w), 8, "f34")
        if self.layers:
            x = self.flatten_with_pe(f34)
            x = at.stack_layers(x, self.layers)
            g34 = self.unflatten(x, h // 8, w // 8)
        else:
            g34 = f34
        _expect_scale(g34, (h, w), 8, "g34")
        g1234 = self.output_fpn(f1, f2, g34)
        _expect_scale(g1234, (h, w), 2, "g1234")
        logits = self.seg_head(g1234)
        _expect_scale(logits, (h, w), 1, "logits")
        if logits.shape[-3] != self.cfg.classes:
            raise ShapeError(f"head produced {logits.shape[-3]} channels for "
                             f"{self.cfg.classes} classes")
        return logits


def _expect_scale(t: Tensor, hw: tuple[int, int], factor: int, name: str) -> None:
    want = (hw[0] // factor, hw[1] // factor)
    got = (t.shape[-2], t.shape[-1])
    if got != want:
        raise ShapeError(f"{name} has spatial extents {got}, expected {want} "
                         f"(1/{factor} of {hw})")


def build_model(cfg: SegtranConfig, seed: int | None = None,
                dtype=None) -> SegtranModel:
    """Deterministically initialize a model; same (config, seed) -> same weights."""
    cfg.validate()
    if seed is None:
        seed = cfg.seed
    rng = np.random.default_rng([seed, 0x5E67])
    store = ParamStore(rng, dtype=dtype if dtype is not None else cfg.dtype)
    return SegtranModel(cfg, store)


def segtran_forward(image: Tensor, model: SegtranModel) -> Tensor:
    return model.forward(image)
