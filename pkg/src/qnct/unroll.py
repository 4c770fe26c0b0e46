"""Unrolled quasi-Newton reconstruction with a latent secant update.

Each unrolled iteration encodes the current learned gradient into a small
latent vector r = E(grad J(x)), takes the preconditioned latent step
s = -H r, decodes it back to image space, and refines H with the rank-two
secant update using (s, z = r' - r). H lives outside the autodiff tape (the
step treats it as a constant matrix, and its update runs detached in
float64); everything else, including the per-iteration data weight and the
pseudo-inverse path, is differentiable end to end.

The first-order variant drops H and the codec and steps x - grad J(x)
directly, which is the equal-budget baseline for the quasi-Newton model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import init as pinit
from . import mixer as mx
from .autodiff import Tensor
from .errors import ShapeError
from .solvers import bfgs_update, symmetry_index

VARIANT_QN = "qn"
VARIANT_FIRST_ORDER = "first-order"


@dataclass(frozen=True)
class CodecConfig:
    """Gradient encoder / direction decoder layout.

    The encoder stacks k rounds of [3x3 conv, instance norm, PReLU,
    2x2 max pool] and finishes with a 1x1 conv to a one-channel latent;
    the decoder mirrors it with 2x2 stride-2 transposed convs.
    """

    k: int = 2
    width: int = 32

    def __post_init__(self):
        if self.k < 1:
            raise ShapeError("codec needs at least one downsampling stack")

    @property
    def factor(self) -> int:
        return 2 ** self.k

    def latent_shape(self, h: int, w: int) -> tuple:
        f = self.factor
        if h % f or w % f:
            raise ShapeError(
                f"image {h}x{w} not divisible by the codec factor {f}"
            )
        return h // f, w // f


@dataclass(frozen=True)
class UnrollConfig:
    """Unrolled loop shape: iteration count, codec depth, operator choices."""

    T: int = 6
    codec: CodecConfig = field(default_factory=CodecConfig)
    pseudo_inverse: str = "fbp"  # or "adjoint"
    fbp_filter: str = geo.FILTER_RAM_LAK
    variant: str = VARIANT_QN

    def __post_init__(self):
        if self.T < 1:
            raise ShapeError("unroll needs T >= 1")
        if self.pseudo_inverse not in ("fbp", "adjoint"):
            raise ShapeError(f"unknown pseudo-inverse {self.pseudo_inverse!r}")
        if self.variant not in (VARIANT_QN, VARIANT_FIRST_ORDER):
            raise ShapeError(f"unknown unroll variant {self.variant!r}")


def init_codec_params(config: CodecConfig, rng, dtype=np.float32) -> dict:
    """Xavier conv weights, zero biases, unit norms, 0.25 PReLU slopes."""
    if isinstance(rng, (int, np.integer)):
        rng = pinit.substream(rng, "init")
    p = {}
    in_c = 1
    for i in range(config.k):
        base = f"encoder.{i}"
        p[base + ".conv.w"] = pinit.xavier_uniform(
            (config.width, in_c, 3, 3), in_c * 9, config.width * 9, rng, dtype)
        p[base + ".conv.b"] = pinit.zeros((config.width,), dtype)
        p[base + ".norm.gamma"] = pinit.ones((config.width,), dtype)
        p[base + ".norm.beta"] = pinit.zeros((config.width,), dtype)
        p[base + ".prelu"] = pinit.full((config.width,), 0.25, dtype)
        in_c = config.width
    p["encoder.head.w"] = pinit.xavier_uniform(
        (1, config.width, 1, 1), config.width, 1, rng, dtype)
    p["encoder.head.b"] = pinit.zeros((1,), dtype)

    in_c = 1
    for i in range(config.k):
        base = f"decoder.{i}"
        p[base + ".convt.w"] = pinit.xavier_uniform(
            (in_c, config.width, 2, 2), in_c * 4, config.width * 4, rng, dtype)
        p[base + ".convt.b"] = pinit.zeros((config.width,), dtype)
        p[base + ".norm.gamma"] = pinit.ones((config.width,), dtype)
        p[base + ".norm.beta"] = pinit.zeros((config.width,), dtype)
        p[base + ".prelu"] = pinit.full((config.width,), 0.25, dtype)
        in_c = config.width
    p["decoder.head.w"] = pinit.xavier_uniform(
        (1, config.width, 1, 1), config.width, 1, rng, dtype)
    p["decoder.head.b"] = pinit.zeros((1,), dtype)
    return p


def encode_gradient(grad: Tensor, params: dict, config: CodecConfig) -> Tensor:
    """(1,1,h,w) gradient to a flat latent of length (h w) / 4^k."""
    if grad.data.ndim != 4 or grad.shape[0] != 1 or grad.shape[1] != 1:
        raise ShapeError(f"encode_gradient: expected (1,1,h,w), got {grad.shape}")
    lh, lw = config.latent_shape(grad.shape[2], grad.shape[3])
    v = grad
    for i in range(config.k):
        base = f"encoder.{i}"
        v = ad.conv2d(v, params[base + ".conv.w"], params[base + ".conv.b"],
                      padding=1)
        v = ad.instance_norm(v, params[base + ".norm.gamma"],
                             params[base + ".norm.beta"])
        v = ad.prelu(v, params[base + ".prelu"])
        v = ad.maxpool2d(v, 2)
    v = ad.conv2d(v, params["encoder.head.w"], params["encoder.head.b"])
    return ad.reshape(v, (lh * lw,))


def decode_direction(latent: Tensor, params: dict, config: CodecConfig,
                     h: int, w: int) -> Tensor:
    """Flat latent back to a (1,1,h,w) update field."""
    lh, lw = config.latent_shape(h, w)
    if latent.shape != (lh * lw,):
        raise ShapeError(
            f"decode_direction: latent {latent.shape} vs expected ({lh * lw},)"
        )
    v = ad.reshape(latent, (1, 1, lh, lw))
    for i in range(config.k):
        base = f"decoder.{i}"
        v = ad.conv_transpose2d(v, params[base + ".convt.w"],
                                params[base + ".convt.b"])
        v = ad.instance_norm(v, params[base + ".norm.gamma"],
                             params[base + ".norm.beta"])
        v = ad.prelu(v, params[base + ".prelu"])
    return ad.conv2d(v, params["decoder.head.w"], params["decoder.head.b"])


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

@dataclass
class QnMixerModel:
    """Weights plus configuration for the unrolled reconstructor."""

    mixer_config: mx.MixerConfig
    unroll_config: UnrollConfig
    params: dict

    @classmethod
    def build(cls, h: int, w: int, seed,
              mixer_config: mx.MixerConfig | None = None,
              unroll_config: UnrollConfig | None = None,
              dtype=np.float32) -> "QnMixerModel":
        mixer_config = mixer_config or mx.desk_mixer_config()
        unroll_config = unroll_config or UnrollConfig()
        rng = seed if isinstance(seed, np.random.Generator) \
            else pinit.substream(seed, "init")
        params = mx.init_mixer_params(mixer_config, h, w, rng, dtype)
        if unroll_config.variant == VARIANT_QN:
            params.update(init_codec_params(unroll_config.codec, rng, dtype))
        for t in range(unroll_config.T):
            params[f"lambda.{t}"] = Tensor(np.zeros(1, dtype=dtype),
                                           requires_grad=True)
        return cls(mixer_config, unroll_config, params)

    def lam(self, t: int) -> Tensor:
        return self.params[f"lambda.{t}"]

    def lambdas(self) -> np.ndarray:
        T = self.unroll_config.T
        return np.array([float(self.params[f"lambda.{t}"].data[0])
                         for t in range(T)])


# ---------------------------------------------------------------------------
# learned gradient and the latent-BFGS iteration
# ---------------------------------------------------------------------------

class _Physics:
    """Differentiable wrappers of the scan operators for one geometry."""

    def __init__(self, geometry: geo.Geometry, h: int, w: int,
                 pseudo_inverse: str, fbp_filter: str):
        self.geometry = geometry
        self.h, self.w = h, w
        self.pseudo_inverse = pseudo_inverse
        self.fbp_filter = fbp_filter
        self.pixel = geometry.pixel_mm(w)

    def project(self, x: Tensor) -> Tensor:
        def fwd(v):
            img = geo.Image(v[0, 0], self.pixel)
            return geo.forward_project(img, self.geometry).values

        def adj(g):
            img = geo.back_project(geo.Sinogram(g), self.geometry,
                                   self.h, self.w)
            return img.values[None, None]

        return ad.linear_operator(x, fwd, adj, name="forward_project")

    def pinv(self, r: Tensor) -> Tensor:
        if self.pseudo_inverse == "adjoint":
            def fwd(v):
                img = geo.back_project(geo.Sinogram(v), self.geometry,
                                       self.h, self.w)
                return img.values[None, None]

            def adj(g):
                img = geo.Image(g[0, 0], self.pixel)
                return geo.forward_project(img, self.geometry).values

            return ad.linear_operator(r, fwd, adj, name="back_project")

        def fwd(v):
            img = geo.fbp(geo.Sinogram(v), self.geometry, self.fbp_filter,
                          self.h, self.w)
            return img.values[None, None]

        def adj(g):
            img = geo.Image(g[0, 0], self.pixel)
            return geo.fbp_transpose(img, self.geometry, self.fbp_filter).values

        return ad.linear_operator(r, fwd, adj, name="fbp")

    def x0(self, y: np.ndarray) -> np.ndarray:
        if self.pseudo_inverse == "adjoint":
            img = geo.back_project(geo.Sinogram(y), self.geometry,
                                   self.h, self.w)
        else:
            img = geo.fbp(geo.Sinogram(y), self.geometry, self.fbp_filter,
                          self.h, self.w)
        return img.values


def learned_gradient(x: Tensor, y: Tensor, physics: _Physics, model:
                     QnMixerModel, t: int) -> Tensor:
    """lambda_t * pinv(A x - y) + G(x), differentiable in params and x."""
    residual = ad.sub(physics.project(x), y)
    data_term = ad.mul(physics.pinv(residual), model.lam(t))
    reg = mx.incept_mixer_forward(x, model.params, model.mixer_config)
    return ad.add(data_term, reg)


@dataclass
class LatentBfgsState:
    """Latent inverse-Hessian state plus diagnostics of the last update."""

    H: np.ndarray
    r: Tensor
    s: np.ndarray | None = None
    z: np.ndarray | None = None
    rho: float | None = None
    si: float = 0.0
    secant_residual: float = 0.0
    frobenius_step: float = 0.0
    skips: int = 0

    @classmethod
    def initial(cls, r: Tensor):
        dim = r.size
        return cls(np.eye(dim, dtype=np.float64), r)

    def updated(self, s64: np.ndarray, z64: np.ndarray,
                r_next: Tensor) -> "LatentBfgsState":
        """Secant-update H with (s, z) and roll the latent forward."""
        H_new, accepted = bfgs_update(self.H, s64, z64)
        if accepted:
            secant = float(np.linalg.norm(H_new @ z64 - s64)
                           / max(np.linalg.norm(s64), 1e-300))
            return LatentBfgsState(H_new, r_next, s64, z64,
                                   1.0 / float(z64 @ s64),
                                   symmetry_index(H_new), secant,
                                   float(np.linalg.norm(H_new - self.H)),
                                   self.skips)
        return LatentBfgsState(self.H, r_next, s64, z64, None,
                               symmetry_index(self.H), np.nan, 0.0,
                               self.skips + 1)


def hessian_diagnostics(state: LatentBfgsState) -> dict:
    """Constraint surrogates of the last update: SI, secant gap, step size."""
    return {
        "si": state.si,
        "secant_residual": state.secant_residual,
        "frobenius_step": state.frobenius_step,
    }


def _latent_step(H: np.ndarray, r: Tensor) -> Tensor:
    # H is a constant in the differentiation graph; only r carries grads.
    return ad.linear_operator(r, lambda v: -(H @ v), lambda g: -(H.T @ g),
                              name="latent_step")


def qn_mixer_iterate(state: LatentBfgsState, x: Tensor, y: Tensor,
                     physics: _Physics, model: QnMixerModel, t: int,
                     is_last: bool):
    """One unrolled iteration; skips the H update on the last iteration."""
    codec = model.unroll_config.codec
    s = _latent_step(state.H, state.r)
    step_img = decode_direction(s, model.params, codec, physics.h, physics.w)
    x_next = ad.add(x, step_img)
    if is_last:
        return x_next, state
    grad = learned_gradient(x_next, y, physics, model, t + 1)
    r_next = encode_gradient(grad, model.params, codec)

    s64 = s.data.astype(np.float64)
    z64 = r_next.data.astype(np.float64) - state.r.data.astype(np.float64)
    return x_next, state.updated(s64, z64, r_next)


def unrolled_forward(y: np.ndarray, geometry: geo.Geometry,
                     model: QnMixerModel, h: int, w: int,
                     x0: np.ndarray | None = None, collect=None):
    """Run the unrolled loop on the tape; returns the final image tensor.

    collect, when given, receives (t, x_tensor, state_or_None) after every
    iteration for tracing; state is None for the first-order variant.
    """
    cfg = model.unroll_config
    dtype = model.params["expand.conv.w"].dtype
    physics = _Physics(geometry, h, w, cfg.pseudo_inverse, cfg.fbp_filter)
    y_arr = np.asarray(y, dtype=dtype)
    y_t = Tensor(y_arr)
    if x0 is None:
        x0 = physics.x0(y_arr)
    x = Tensor(np.asarray(x0, dtype=dtype).reshape(1, 1, h, w))

    if cfg.variant == VARIANT_FIRST_ORDER:
        for t in range(cfg.T):
            grad = learned_gradient(x, y_t, physics, model, t)
            x = ad.sub(x, grad)
            if collect is not None:
                collect(t, x, None)
        return x

    grad0 = learned_gradient(x, y_t, physics, model, 0)
    state = LatentBfgsState.initial(encode_gradient(grad0, model.params,
                                                    cfg.codec))
    for t in range(cfg.T):
        x, state = qn_mixer_iterate(state, x, y_t, physics, model, t,
                                    is_last=(t == cfg.T - 1))
        if collect is not None:
            collect(t, x, state)
    return x


def unrolled_reconstruct(sino: geo.Sinogram, geometry: geo.Geometry,
                         model: QnMixerModel, h: int, w: int,
                         reference: np.ndarray | None = None,
                         keep_intermediates: bool = False):
    """Inference-mode reconstruction; returns (Image, trace, intermediates)."""
    from .metrics import psnr  # local import to avoid a cycle

    trace = []
    intermediates = []

    def collect(t, x_t, state):
        row = {
            "t": t,
            "psnr": (float(psnr(x_t.data[0, 0], reference))
                     if reference is not None else np.nan),
        }
        if state is not None:
            row.update(hessian_diagnostics(state))
        else:
            row.update({"si": np.nan, "secant_residual": np.nan,
                        "frobenius_step": np.nan})
        trace.append(row)
        if keep_intermediates:
            intermediates.append(x_t.data[0, 0].copy())

    with ad.no_grad():
        x = unrolled_forward(sino.values, geometry, model, h, w,
                             collect=collect)
    img = geo.Image(x.data[0, 0].copy(), geometry.pixel_mm(w))
    return img, trace, intermediates
