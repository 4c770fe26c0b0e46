"""End-to-end training of the unrolled reconstructor.

Sinograms are synthesized from ground-truth phantoms (full-view projection,
photon noise, view subsampling) once per item and cached; each step runs
the unrolled forward on one item, backpropagates the mean squared error,
and applies a decoupled-weight-decay adaptive-moment update. The data
weights lambda_t and PReLU slopes are excluded from decay: pulling
lambda to zero would erase the data term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import init as pinit
from .autodiff import Tensor
from .errors import QnctError, ShapeError
from .unroll import QnMixerModel, unrolled_forward

log = logging.getLogger("qnct.train")


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-2
    lr_decay_factor: float = 0.1
    lr_decay_after_epoch: int = 40
    batch_size: int = 1
    seed: int = 0
    max_steps: int | None = None
    checkpoint_dir: str | None = None
    shuffle: bool = True
    log_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ShapeError("lr must be > 0")
        if not 0.0 <= self.lr_decay_factor <= 1.0:
            raise ShapeError("lr decay factor must be in [0, 1]")
        if self.batch_size != 1:
            raise ShapeError("only batch size 1 is supported")


def paper_train_config() -> TrainConfig:
    """Full-scale defaults: 50 epochs, lr 1e-4, decay 0.1 after epoch 40."""
    return TrainConfig()


def desk_train_config(seed: int = 0, max_steps: int = 1000) -> TrainConfig:
    return TrainConfig(epochs=10_000, lr=1e-3, lr_decay_after_epoch=10_000,
                       seed=seed, max_steps=max_steps)


class TrainingAborted(QnctError):
    """Loss became non-finite; carries the last good checkpoint path."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class AdamW:
    """Adaptive moments with decoupled weight decay.

    beta1 0.9, beta2 0.999, eps 1e-8; decay multiplies the weight by
    (1 - lr * wd) independently of the gradient step. Parameters named in
    no_decay keep wd = 0.
    """

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, no_decay=()):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.no_decay = tuple(no_decay)
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def _decays(self, name: str) -> bool:
        return not any(name.startswith(p) or name.endswith(p)
                       for p in self.no_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and self._decays(name):
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * update).astype(p.data.dtype)


NO_DECAY = ("lambda.", ".prelu")


def default_optimizer(model: QnMixerModel, config: TrainConfig) -> AdamW:
    return AdamW(model.params, config.lr, config.weight_decay,
                 no_decay=NO_DECAY)


@dataclass
class TrainItem:
    truth: np.ndarray
    sino: np.ndarray
    x0: np.ndarray | None = None


def synthesize_dataset(truths, full_geometry: geo.Geometry, n_views: int,
                       poisson: float, gaussian_frac: float, seed: int):
    """Project, add measurement noise, and subsample each ground truth.

    Returns (items, sparse_geometry); noise is seeded per item so the
    dataset is a pure function of (truths, geometry, noise, seed).
    """
    items = []
    sparse_geometry = None
    for idx, truth in enumerate(truths):
        truth = np.asarray(truth, dtype=np.float32)
        img = geo.Image(truth, full_geometry.pixel_mm(truth.shape[1]))
        y_full = geo.forward_project(img, full_geometry)
        y_noisy = geo.simulate_measurement(
            y_full, poisson, gaussian_frac, seed=(int(seed) * 100_003 + idx))
        y_sub, g_sub = geo.subsample_views(y_noisy, full_geometry, n_views)
        sparse_geometry = g_sub
        items.append(TrainItem(truth, y_sub.values))
    return items, sparse_geometry


def mse_loss(x: Tensor, target: np.ndarray) -> Tensor:
    diff = ad.sub(x, Tensor(np.asarray(target, dtype=x.dtype)
                            .reshape(x.shape)))
    return ad.mean(ad.mul(diff, diff))


def train_unrolled(items, geometry: geo.Geometry, model: QnMixerModel,
                   config: TrainConfig, optimizer: AdamW | None = None):
    """Optimize the model on TrainItems; returns (model, loss_curve).

    Deterministic under config.seed (data order included). Checkpoints are
    written per epoch when checkpoint_dir is set; a non-finite loss aborts
    with the last good checkpoint attached.
    """
    h, w = items[0].truth.shape
    optimizer = optimizer or default_optimizer(model, config)
    order_rng = pinit.substream(config.seed, "data")
    curve = []
    step = 0
    lr0 = config.lr
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_ckpt = None
    for item in items:
        if item.x0 is None:
            item.x0 = _initial_image(item.sino, geometry, model, h, w)
    for epoch in range(config.epochs):
        lr = lr0 * (config.lr_decay_factor
                    if epoch >= config.lr_decay_after_epoch else 1.0)
        optimizer.lr = lr
        order = (order_rng.permutation(len(items)) if config.shuffle
                 else np.arange(len(items)))
        for idx in order:
            item = items[int(idx)]
            optimizer.zero_grad()
            x = unrolled_forward(item.sino, geometry, model, h, w, x0=item.x0)
            loss = mse_loss(x, item.truth)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingAborted(
                    f"loss became non-finite at step {step}",
                    checkpoint_path=last_ckpt,
                )
            loss.backward()
            optimizer.step()
            curve.append({"step": step, "epoch": epoch, "loss": value,
                          "lr": lr})
            if config.log_every and step % config.log_every == 0:
                log.info("step %d epoch %d loss %.5f", step, epoch, value)
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                if ckpt_dir:
                    last_ckpt = _save(ckpt_dir, model, epoch, step)
                return model, curve
        if ckpt_dir:
            last_ckpt = _save(ckpt_dir, model, epoch, step)
    return model, curve


def _initial_image(sino, geometry, model, h, w):
    from .unroll import _Physics

    cfg = model.unroll_config
    physics = _Physics(geometry, h, w, cfg.pseudo_inverse, cfg.fbp_filter)
    return physics.x0(np.asarray(sino, dtype=np.float32))


def _save(ckpt_dir: Path, model: QnMixerModel, epoch: int, step: int):
    path = ckpt_dir / f"epoch{epoch:04d}.ckpt"
    meta = model_meta(model)
    meta.update({"epoch": epoch, "step": step})
    ad.save_checkpoint(model.params, path, meta)
    return path


def model_meta(model: QnMixerModel) -> dict:
    mc = model.mixer_config
    uc = model.unroll_config
    return {
        "mixer.patch": mc.patch,
        "mixer.d": mc.d,
        "mixer.n_layers": mc.n_layers,
        "mixer.branch_channels": ",".join(str(c) for c in mc.branch_channels),
        "unroll.T": uc.T,
        "unroll.k": uc.codec.k,
        "unroll.codec_width": uc.codec.width,
        "unroll.pseudo_inverse": uc.pseudo_inverse,
        "unroll.fbp_filter": uc.fbp_filter,
        "unroll.variant": uc.variant,
    }


def model_from_checkpoint(path) -> QnMixerModel:
    """Rebuild a model (configs from the manifest meta, weights bit-exact)."""
    from . import mixer as mx
    from .unroll import CodecConfig, UnrollConfig

    arrays, meta = ad.load_checkpoint(path)
    try:
        branch = tuple(int(c) for c in meta["mixer.branch_channels"].split(","))
        mixer_config = mx.MixerConfig(
            patch=int(meta["mixer.patch"]), d=int(meta["mixer.d"]),
            n_layers=int(meta["mixer.n_layers"]), branch_channels=branch,
        )
        unroll_config = UnrollConfig(
            T=int(meta["unroll.T"]),
            codec=CodecConfig(int(meta["unroll.k"]),
                              int(meta["unroll.codec_width"])),
            pseudo_inverse=meta["unroll.pseudo_inverse"],
            fbp_filter=meta["unroll.fbp_filter"],
            variant=meta["unroll.variant"],
        )
    except KeyError as exc:
        raise QnctError(f"checkpoint {path} lacks model meta key {exc}") from exc
    params = {name: Tensor(arr, requires_grad=True)
              for name, arr in arrays.items()}
    return QnMixerModel(mixer_config, unroll_config, params)
