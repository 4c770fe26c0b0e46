"""Learned regularization-gradient network.

Pipeline: a four-branch inception block lifts the single-channel image to d
feature channels, a stride-p conv patchifies to a (h/p, w/p, d) token grid,
N mixer layers alternate height/width token MLPs with a channel MLP (each
wrapped as residual around a layer norm), and a patch-expansion stage
(linear d -> p^2 d without bias, per-pixel layer norm, 1x1 conv) returns a
single-channel image of the input size. The final 1x1 conv initializes to
zero so an untrained network contributes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import init as pinit
from .autodiff import Tensor
from .errors import ShapeError


@dataclass(frozen=True)
class MixerConfig:
    patch: int = 4
    d: int = 96
    n_layers: int = 2
    branch_channels: tuple = (16, 32, 32, 16)
    token_hidden_ratio: int = 4  # hidden width = ratio * token count
    channel_hidden_ratio: int = 4  # hidden width = ratio * d
    eps: float = 1e-5

    def __post_init__(self):
        if sum(self.branch_channels) != self.d:
            raise ShapeError(
                f"inception branches {self.branch_channels} must concat to d={self.d}"
            )
        if self.patch < 1 or self.n_layers < 1:
            raise ShapeError("patch size and layer count must be >= 1")

    def check_size(self, h: int, w: int):
        if h % self.patch or w % self.patch:
            raise ShapeError(
                f"image {h}x{w} not divisible by patch size {self.patch}"
            )

    def scaled(self, d: int) -> "MixerConfig":
        """Same layout at a different width; branches keep the 1:2:2:1 split."""
        if d % 6:
            raise ShapeError("d must be divisible by 6 to keep the branch split")
        unit = d // 6
        return MixerConfig(self.patch, d, self.n_layers,
                           (unit, 2 * unit, 2 * unit, unit),
                           self.token_hidden_ratio, self.channel_hidden_ratio,
                           self.eps)


def desk_mixer_config() -> MixerConfig:
    return MixerConfig().scaled(48)


def _conv_param(name, out_c, in_c, k, rng, params, dtype, bias=True):
    fan_in = in_c * k * k
    fan_out = out_c * k * k
    params[name + ".w"] = pinit.xavier_uniform((out_c, in_c, k, k), fan_in,
                                               fan_out, rng, dtype)
    if bias:
        params[name + ".b"] = pinit.zeros((out_c,), dtype)


def _mlp_param(name, d_in, hidden, d_out, rng, params, dtype):
    params[name + ".w1"] = pinit.truncated_normal((d_in, hidden), 0.02, rng, dtype)
    params[name + ".b1"] = pinit.zeros((hidden,), dtype)
    params[name + ".w2"] = pinit.truncated_normal((hidden, d_out), 0.02, rng, dtype)
    params[name + ".b2"] = pinit.zeros((d_out,), dtype)


def _norm_param(name, d, params, dtype):
    params[name + ".gamma"] = pinit.ones((d,), dtype)
    params[name + ".beta"] = pinit.zeros((d,), dtype)


def init_mixer_params(config: MixerConfig, h: int, w: int, rng,
                      dtype=np.float32) -> dict:
    """Deterministic parameter set for an h x w input.

    Convs get Xavier uniform weights, MLPs truncated normal (std 0.02,
    cut at 2 std), biases and the final 1x1 conv start at zero, PReLU
    slopes at 0.25.
    """
    if isinstance(rng, (int, np.integer)):
        rng = pinit.substream(rng, "init")
    config.check_size(h, w)
    c1, c2, c3, c4 = config.branch_channels
    bottleneck = c1
    p = {}
    _conv_param("inception.b1.conv", c1, 1, 1, rng, p, dtype)
    p["inception.b1.prelu"] = pinit.full((c1,), 0.25, dtype)
    _conv_param("inception.b2.conv1", bottleneck, 1, 1, rng, p, dtype)
    p["inception.b2.prelu1"] = pinit.full((bottleneck,), 0.25, dtype)
    _conv_param("inception.b2.conv2", c2, bottleneck, 3, rng, p, dtype)
    p["inception.b2.prelu2"] = pinit.full((c2,), 0.25, dtype)
    _conv_param("inception.b3.conv1", bottleneck, 1, 1, rng, p, dtype)
    p["inception.b3.prelu1"] = pinit.full((bottleneck,), 0.25, dtype)
    _conv_param("inception.b3.conv2", c3, bottleneck, 5, rng, p, dtype)
    p["inception.b3.prelu2"] = pinit.full((c3,), 0.25, dtype)
    _conv_param("inception.b4.conv", c4, 1, 1, rng, p, dtype)
    p["inception.b4.prelu"] = pinit.full((c4,), 0.25, dtype)

    _conv_param("patch_embed", config.d, config.d, config.patch, rng, p, dtype,
                bias=False)

    th, tw = h // config.patch, w // config.patch
    for i in range(config.n_layers):
        base = f"mixer.{i}"
        _norm_param(base + ".ln1", config.d, p, dtype)
        _mlp_param(base + ".height", th, config.token_hidden_ratio * th, th,
                   rng, p, dtype)
        _mlp_param(base + ".width", tw, config.token_hidden_ratio * tw, tw,
                   rng, p, dtype)
        _norm_param(base + ".ln2", config.d, p, dtype)
        _mlp_param(base + ".channel", config.d,
                   config.channel_hidden_ratio * config.d, config.d, rng, p,
                   dtype)

    p["expand.linear.w"] = pinit.truncated_normal(
        (config.d, config.patch * config.patch * config.d), 0.02, rng, dtype
    )
    _norm_param("expand.ln", config.d, p, dtype)
    p["expand.conv.w"] = pinit.zeros((1, config.d, 1, 1), dtype)
    p["expand.conv.b"] = pinit.zeros((1,), dtype)
    return p


def _conv_block(x, params, name, padding=0):
    return ad.conv2d(x, params[name + ".w"], params[name + ".b"],
                     padding=padding)


def inception_forward(x: Tensor, params: dict, config: MixerConfig) -> Tensor:
    """Four parallel branches concatenated to d channels, size preserved."""
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"inception_forward: expected (n,1,h,w), got {x.shape}")
    b1 = ad.prelu(_conv_block(x, params, "inception.b1.conv"),
                  params["inception.b1.prelu"])
    b2 = ad.prelu(_conv_block(x, params, "inception.b2.conv1"),
                  params["inception.b2.prelu1"])
    b2 = ad.prelu(_conv_block(b2, params, "inception.b2.conv2", padding=1),
                  params["inception.b2.prelu2"])
    b3 = ad.prelu(_conv_block(x, params, "inception.b3.conv1"),
                  params["inception.b3.prelu1"])
    b3 = ad.prelu(_conv_block(b3, params, "inception.b3.conv2", padding=2),
                  params["inception.b3.prelu2"])
    b4 = ad.maxpool2d(x, 3, stride=1, padding=1)
    b4 = ad.prelu(_conv_block(b4, params, "inception.b4.conv"),
                  params["inception.b4.prelu"])
    return ad.concat([b1, b2, b3, b4], axis=1)


def _mlp(x, params, name):
    h = ad.gelu(ad.linear(x, params[name + ".w1"], params[name + ".b1"]))
    return ad.linear(h, params[name + ".w2"], params[name + ".b2"])


def mixer_layer(e: Tensor, params: dict, config: MixerConfig, idx: int) -> Tensor:
    """Token mixing (height then width MLP) and channel mixing, residual.

    e is channels-last (n, th, tw, d). Each MLP acts on its own axis with
    weights shared across the other axes.
    """
    base = f"mixer.{idx}"
    th, tw = e.shape[1], e.shape[2]
    if params[base + ".height.w1"].shape[0] != th or \
            params[base + ".width.w1"].shape[0] != tw:
        raise ShapeError(
            f"mixer_layer: token grid {th}x{tw} does not match parameters"
        )
    v = ad.layer_norm(e, params[base + ".ln1.gamma"], params[base + ".ln1.beta"],
                      config.eps)
    v = ad.permute(v, (0, 3, 2, 1))  # (n, d, tw, th): height tokens last
    v = _mlp(v, params, base + ".height")
    v = ad.permute(v, (0, 1, 3, 2))  # (n, d, th, tw): width tokens last
    v = _mlp(v, params, base + ".width")
    v = ad.permute(v, (0, 2, 3, 1))  # back to (n, th, tw, d)
    e = ad.add(e, v)
    u = ad.layer_norm(e, params[base + ".ln2.gamma"], params[base + ".ln2.beta"],
                      config.eps)
    u = _mlp(u, params, base + ".channel")
    return ad.add(e, u)


def patch_expand(e: Tensor, params: dict, config: MixerConfig) -> Tensor:
    """Tokens back to pixels: linear to p^2 d, norm over d, 1x1 conv to 1."""
    n, th, tw, d = e.shape
    pch = config.patch
    y = ad.linear(e, params["expand.linear.w"])  # (n, th, tw, p*p*d), no bias
    y = ad.reshape(y, (n, th, tw, pch, pch, d))
    y = ad.layer_norm(y, params["expand.ln.gamma"], params["expand.ln.beta"],
                      config.eps)
    y = ad.permute(y, (0, 5, 1, 3, 2, 4))  # (n, d, th, p, tw, p)
    y = ad.reshape(y, (n, d, th * pch, tw * pch))
    return ad.conv2d(y, params["expand.conv.w"], params["expand.conv.b"])


def incept_mixer_forward(x: Tensor, params: dict, config: MixerConfig) -> Tensor:
    """Full regularization-gradient network, (n,1,h,w) -> (n,1,h,w)."""
    config.check_size(x.shape[2], x.shape[3])
    f = inception_forward(x, params, config)
    e = ad.conv2d(f, params["patch_embed.w"], stride=config.patch)
    e = ad.permute(e, (0, 2, 3, 1))  # channels last token grid
    for i in range(config.n_layers):
        e = mixer_layer(e, params, config, i)
    return patch_expand(e, params, config)


def count_params(params: dict) -> dict:
    """Parameter totals per stage, in raw counts."""
    stages = {"inception": 0, "patch_embed": 0, "expand": 0}
    for name, t in params.items():
        size = t.size if isinstance(t, Tensor) else np.asarray(t).size
        if name.startswith("mixer."):
            key = "mixer." + name.split(".")[1]
            stages[key] = stages.get(key, 0) + size
        else:
            for stage in ("inception", "patch_embed", "expand"):
                if name.startswith(stage):
                    stages[stage] += size
    stages["total"] = sum(v for k, v in stages.items())
    return stages
