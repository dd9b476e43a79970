"""Diversified multi-scale encoder-decoder sub-models and their ensemble.

Each sub-model is a small V-Net-style network: an encoder of ``depth`` levels
(stride-2 convolutions between levels), a mirrored decoder with additive skip
connections and one 1x1x1 projection head per decoder level. The three default
sub-models share this layout and differ only in normalisation and in how the
decoder upsamples between levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import NormState, Tensor

NORM_MODES = ("group", "batch", "instance")
UPSAMPLE_MODES = ("trilinear", "transposed_conv", "nearest")

# Keeps every probability strictly inside (0, 1) in float32.
PROB_EPS = 1e-6


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SubModelConfig:
    model_index: int
    norm_mode: str
    upsample_mode: str
    base_channels: int = 8
    depth: int = 4
    num_classes: int = 2
    in_channels: int = 1
    groups: int = 4
    encoder_convs: int = 2
    decoder_convs: int = 2

    def validate(self):
        if self.model_index not in (1, 2, 3):
            raise ConfigurationError(f"model_index must be 1, 2 or 3, got {self.model_index}")
        if self.norm_mode not in NORM_MODES:
            raise ConfigurationError(f"unknown norm_mode {self.norm_mode!r}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigurationError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")
        if self.num_classes != 2:
            raise ConfigurationError("only binary segmentation (num_classes=2, one sigmoid channel) is implemented")
        if self.norm_mode == "group" and self.base_channels % self.groups:
            raise ConfigurationError(
                f"group norm needs base_channels ({self.base_channels}) divisible by groups ({self.groups})"
            )
        if self.encoder_convs < 1 or self.decoder_convs < 1:
            raise ConfigurationError("each level needs at least one convolution")


DEFAULT_SUBMODELS = (
    SubModelConfig(1, "group", "trilinear"),
    SubModelConfig(2, "batch", "transposed_conv"),
    SubModelConfig(3, "instance", "nearest"),
)


@dataclass
class EnsembleConfig:
    models: tuple = DEFAULT_SUBMODELS
    patch_shape: tuple = (32, 32, 32)
    seed: int = 0

    def validate(self):
        if len(self.models) != 3:
            raise ConfigurationError(f"the ensemble has exactly 3 sub-models, got {len(self.models)}")
        for i, cfg in enumerate(self.models, start=1):
            cfg.validate()
            if cfg.model_index != i:
                raise ConfigurationError(f"sub-model in slot {i} has model_index {cfg.model_index}")
            check_patch_shape(self.patch_shape, cfg.depth)


def check_patch_shape(shape: Sequence[int], depth: int):
    div = 2 ** (depth - 1)
    for axis, s in zip("DHW", shape):
        if s % div:
            raise ConfigurationError(f"patch dimension {axis}={s} is not divisible by 2^(depth-1)={div}")


@dataclass
class MultiScalePrediction:
    """Full-resolution foreground probabilities; ``probs[0]`` is scale 1 (final head)."""

    model_index: int
    probs: list = field(default_factory=list)

    def scale(self, s: int) -> Tensor:
        """1-based access: scale 1 is the last decoder block, scale S the deepest."""
        if not 1 <= s <= len(self.probs):
            raise IndexError(f"scale {s} outside 1..{len(self.probs)}")
        return self.probs[s - 1]

    @property
    def num_scales(self) -> int:
        return len(self.probs)


def seed_for(seed: int, model_index: int) -> int:
    """Per-slot initialisation seed derived from an ensemble seed."""
    return int(np.random.SeedSequence([seed, model_index]).generate_state(1)[0])


class SubModel:
    def __init__(self, cfg: SubModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.norms: dict[str, NormState] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # -- construction -------------------------------------------------

    def _param(self, name, data):
        full = f"m{self.cfg.model_index}.{name}"
        self.params[name] = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=full)

    def _conv(self, name, cin, cout, k):
        bound = np.sqrt(6.0 / (cin * k ** 3))
        self._param(f"{name}.weight", self._rng.uniform(-bound, bound, (cout, cin, k, k, k)))
        self._param(f"{name}.bias", np.zeros(cout))

    def _conv_transpose(self, name, cin, cout):
        bound = np.sqrt(6.0 / cin)
        self._param(f"{name}.weight", self._rng.uniform(-bound, bound, (cin, cout, 2, 2, 2)))
        self._param(f"{name}.bias", np.zeros(cout))

    def _norm(self, name, ch):
        self._param(f"{name}.gamma", np.ones(ch))
        self._param(f"{name}.beta", np.zeros(ch))
        self.norms[name] = NormState()

    def channels(self, level: int) -> int:
        return self.cfg.base_channels * 2 ** (level - 1)

    def _build(self):
        cfg = self.cfg
        prev = cfg.in_channels
        for lvl in range(1, cfg.depth + 1):
            ch = self.channels(lvl)
            for i in range(1, cfg.encoder_convs + 1):
                self._conv(f"enc{lvl}.conv{i}", prev if i == 1 else ch, ch, 3)
                self._norm(f"enc{lvl}.norm{i}", ch)
            prev = ch
        for lvl in range(cfg.depth, 0, -1):
            ch = self.channels(lvl)
            if lvl < cfg.depth:
                wide = self.channels(lvl + 1)
                if cfg.upsample_mode == "transposed_conv":
                    self._conv_transpose(f"dec{lvl}.up", wide, ch)
                else:
                    self._conv(f"dec{lvl}.up", wide, ch, 1)
                self._norm(f"dec{lvl}.upnorm", ch)
            n_convs = 1 if lvl == cfg.depth else cfg.decoder_convs
            for i in range(1, n_convs + 1):
                self._conv(f"dec{lvl}.conv{i}", ch, ch, 3)
                self._norm(f"dec{lvl}.norm{i}", ch)
            self._conv(f"head{lvl}", ch, 1, 1)

    # -- state ---------------------------------------------------------

    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_training(self, training: bool):
        for st in self.norms.values():
            st.training = training

    # -- forward -------------------------------------------------------

    def _cnr(self, x, conv, norm, stride=1):
        p = self.params
        y = T.conv3d(x, p[f"{conv}.weight"], p[f"{conv}.bias"], stride=stride, padding=1)
        return self._nr(y, norm)

    def _nr(self, y, norm):
        p = self.params
        y = T.normalize(
            y, self.cfg.norm_mode, p[f"{norm}.gamma"], p[f"{norm}.beta"],
            eps=1e-5, state=self.norms[norm], groups=self.cfg.groups,
        )
        return T.relu(y)

    def _upsample(self, x, lvl):
        p = self.params
        w, b = p[f"dec{lvl}.up.weight"], p[f"dec{lvl}.up.bias"]
        if self.cfg.upsample_mode == "transposed_conv":
            y = T.conv_transpose3d(x, w, b, stride=2)
        else:
            # 1x1 projection commutes with interpolation; doing it first is 8x cheaper
            y = T.upsample(T.conv3d(x, w, b), 2, self.cfg.upsample_mode)
        return self._nr(y, f"dec{lvl}.upnorm")

    def forward(self, x: Tensor) -> MultiScalePrediction:
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected input (N,{cfg.in_channels},D,H,W), got shape {x.shape}")
        check_patch_shape(x.shape[2:], cfg.depth)
        skips = []
        h = x
        for lvl in range(1, cfg.depth + 1):
            for i in range(1, cfg.encoder_convs + 1):
                stride = 2 if (i == 1 and lvl > 1) else 1
                h = self._cnr(h, f"enc{lvl}.conv{i}", f"enc{lvl}.norm{i}", stride)
            skips.append(h)
        logits = {}
        for lvl in range(cfg.depth, 0, -1):
            if lvl < cfg.depth:
                h = T.add(self._upsample(h, lvl), skips[lvl - 1])
            n_convs = 1 if lvl == cfg.depth else cfg.decoder_convs
            for i in range(1, n_convs + 1):
                h = self._cnr(h, f"dec{lvl}.conv{i}", f"dec{lvl}.norm{i}")
            logits[lvl] = T.conv3d(h, self.params[f"head{lvl}.weight"], self.params[f"head{lvl}.bias"])
        n, _, d, hh, w = x.shape
        probs = []
        for lvl in range(1, cfg.depth + 1):
            z = logits[lvl]
            if lvl > 1:
                z = T.upsample(z, 2 ** (lvl - 1), "trilinear")
            probs.append(T.reshape(T.sigmoid(z, eps=PROB_EPS), (n, d, hh, w)))
        return MultiScalePrediction(cfg.model_index, probs)

    __call__ = forward


def build_submodel(cfg: SubModelConfig, seed: int) -> SubModel:
    return SubModel(cfg, seed)


def build_ensemble(ens: EnsembleConfig, seeds: Sequence[int] | None = None) -> list:
    ens.validate()
    if seeds is None:
        seeds = [seed_for(ens.seed, c.model_index) for c in ens.models]
    return [build_submodel(c, s) for c, s in zip(ens.models, seeds)]


def forward_multiscale(model: SubModel, x: Tensor, training: bool) -> MultiScalePrediction:
    model.set_training(training)
    if training:
        return model.forward(x)
    with T.no_grad():
        return model.forward(x)


def ensemble_forward(models: Sequence[SubModel], x: Tensor, training: bool) -> list:
    preds = [forward_multiscale(m, x, training) for m in models]
    return sorted(preds, key=lambda p: p.model_index)


def imd_configs(enable_imd: bool, base: Sequence[SubModelConfig] = DEFAULT_SUBMODELS) -> tuple:
    """Sub-model configs with (default) or without intra-model diversity.

    Without diversity every slot uses the second model's batch-norm +
    transposed-convolution layers.
    """
    if enable_imd:
        return tuple(base)
    ref = base[1]
    return tuple(replace(ref, model_index=i) for i in (1, 2, 3))
