"""Loss, optimizer loop, and the synthetic deformable-pair generator.

Training is fully self-contained: every step draws a fresh synthetic image
pair with a known ground-truth deformation, registers it, and descends the
similarity-plus-smoothness loss.  The generator builds its ground truth by
composing a few clamped spline fields, so g_true is always invertible and
the endpoint error against it is a meaningful progress signal.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConvergenceError, ValidationError
from .fields import compose, warp_image, warp_labels
from .networks import EncoderConfig, ModelWeights, save_weights
from .pipeline import register
from .splines import ControlGrid, gamma_for_level, upsample_control_grid
from .tensor import Tensor


@dataclass
class TrainConfig:
    lam: float = 1.0
    learning_rate: float = 1e-3
    lr_schedule: str = "constant"
    warmup_steps: int = 100
    steps: int = 2000
    batch_size: int = 1
    seed: int = 0
    size: int = 64
    n: int = 2
    mode: str = "sym"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    noise_sigma: float = 0.02
    checkpoint_path: str = None
    checkpoint_every: int = 0
    dtype: object = np.float32

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("TrainConfig: lam must be >= 0")
        if self.mode not in ("sym", "non_sym"):
            raise ValidationError("TrainConfig: mode must be sym or non_sym")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError("TrainConfig: lr_schedule must be "
                                  "constant or cosine")
        div = 2 ** (self.encoder.num_levels - 1)
        if self.size % div != 0:
            raise ValidationError("TrainConfig: size %d not divisible by %d"
                                  % (self.size, div))
        if self.batch_size < 1 or self.steps < 0:
            raise ValidationError("TrainConfig: steps/batch_size out of range")


@dataclass
class SyntheticPair:
    x_a: np.ndarray
    x_b: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    g_true: np.ndarray


# ground-truth warp strength: number of composed fields (inclusive range) and
# the per-field fraction of the topology-preserving amplitude bound
_SYNTH_FIELDS = (5, 5)
_SYNTH_AMP = (0.8, 1.0)


def _lr_at(cfg, step):
    """Per-step learning rate: linear warmup then cosine decay to 5%."""
    peak = cfg.learning_rate
    if cfg.lr_schedule == "constant":
        return peak
    warm = min(cfg.warmup_steps, max(1, cfg.steps // 2))
    if step < warm:
        return peak * (step + 1) / warm
    prog = (step - warm) / max(1, cfg.steps - warm)
    return peak * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * prog)))


def _random_clamped_field(rng, size, n, level, amplitude):
    """Dense voxel-unit field of a random control grid clamped to the bound."""
    gshape = (size // 2 ** level,) * n
    gamma = gamma_for_level(n, level)
    vals = rng.uniform(-1.0, 1.0, size=(n,) + gshape) * gamma * amplitude
    grid = ControlGrid(level=level, values=vals.astype(np.float64),
                       origin=(0,) * n)
    dense = upsample_control_grid(grid, (size,) * n)
    return dense.data * float(2 ** level)


def synth_pair(seed, size=64, n=2, num_levels=3, noise_sigma=0.02):
    """Random blob image pair with labels and an invertible ground-truth warp.

    x_b is x_a pulled back through g_true plus Gaussian pixel noise; the
    label maps are warped with nearest-neighbour sampling so they stay
    crisp.  All randomness comes from `seed`.
    """
    if size % 2 ** (num_levels - 1) != 0:
        raise ValidationError("synth_pair: size %d not divisible by %d"
                              % (size, 2 ** (num_levels - 1)))
    rng = np.random.default_rng(seed)
    shape = (size,) * n
    coords = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64)
                                    for s in shape], indexing="ij"), axis=0)
    num_fg = 8
    num_blobs = int(rng.integers(12, 17))
    image = np.zeros(shape, dtype=np.float64)
    weights = np.zeros((num_fg,) + shape, dtype=np.float64)
    for i in range(num_blobs):
        center = rng.uniform(0.12 * size, 0.88 * size, size=n)
        sigma = rng.uniform(size / 20.0, size / 10.0)
        amp = rng.uniform(0.5, 1.0)
        r2 = np.zeros(shape, dtype=np.float64)
        for ax in range(n):
            r2 += (coords[ax] - center[ax]) ** 2
        blob = amp * np.exp(-r2 / (2.0 * sigma ** 2))
        image += blob
        weights[i % num_fg] += blob
    image /= image.max()
    labels = (np.argmax(weights, axis=0) + 1).astype(np.uint16)
    labels[image < 0.08] = 0
    # tiny slivers make the overlap metrics noisy; fold them into background
    for lab in range(1, num_fg + 1):
        if np.count_nonzero(labels == lab) < 20:
            labels[labels == lab] = 0

    # coarse levels carry displacement proportional to their control spacing,
    # so draw from the two coarsest levels the volume can support
    top = max(1, min(num_levels + 1, int(math.log2(size)) - 2))
    g_true = None
    for _ in range(int(rng.integers(_SYNTH_FIELDS[0], _SYNTH_FIELDS[1] + 1))):
        level = int(rng.integers(max(1, top - 1), top + 1))
        amp = rng.uniform(_SYNTH_AMP[0], _SYNTH_AMP[1])
        d = _random_clamped_field(rng, size, n, level, amp)
        g_true = d if g_true is None else compose(g_true, d).data
    g_true = np.ascontiguousarray(g_true, dtype=np.float64)

    x_a = image[None].astype(np.float32)
    with T.no_grad():
        warped = warp_image(Tensor(x_a.astype(np.float64)), Tensor(g_true))
    x_b = warped.data + rng.normal(0.0, noise_sigma, size=(1,) + shape)
    labels_b = warp_labels(labels, g_true).astype(np.uint16)
    return SyntheticPair(
        x_a=x_a,
        x_b=x_b.astype(np.float32),
        labels_a=labels,
        labels_b=labels_b,
        g_true=g_true.astype(np.float32),
    )


def total_loss(x_a, x_b, f12, f21, lam):
    """Similarity in both directions plus weighted smoothness of both fields."""
    sim = T.add(T.lncc_loss(warp_image(x_a, f12), x_b),
                T.lncc_loss(x_a, warp_image(x_b, f21)))
    if lam == 0:
        return sim
    reg = T.add(T.grad_l2_penalty(f12), T.grad_l2_penalty(f21))
    return T.add(sim, T.scale(reg, float(lam)))


class Adam:
    """Adaptive-moment descent over a list of Parameters."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = (self.m[i] / b1c) / (np.sqrt(self.v[i] / b2c) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def train(config=None, progress=None):
    """Optimize fresh weights on synthetic pairs; returns (weights, history).

    history holds one mean loss value per step.  Deterministic for a fixed
    config.  Non-finite loss aborts immediately rather than continuing with
    poisoned moments.
    """
    cfg = config if config is not None else TrainConfig()
    weights = ModelWeights(cfg.encoder, cfg.n, in_channels=1, seed=cfg.seed,
                           dtype=cfg.dtype)
    opt = Adam(weights.parameters(), lr=cfg.learning_rate)
    history = []
    pair_index = 0
    for step in range(cfg.steps):
        opt.zero_grad()
        step_loss = 0.0
        for _ in range(cfg.batch_size):
            pair = synth_pair((cfg.seed + 1) * 1000003 + pair_index,
                              cfg.size, cfg.n, cfg.encoder.num_levels,
                              cfg.noise_sigma)
            pair_index += 1
            result = register(weights,
                              pair.x_a.astype(cfg.dtype),
                              pair.x_b.astype(cfg.dtype),
                              mode=cfg.mode)
            loss = total_loss(Tensor(pair.x_a.astype(cfg.dtype)),
                              Tensor(pair.x_b.astype(cfg.dtype)),
                              result.f12, result.f21, cfg.lam)
            value = float(loss.data)
            if not math.isfinite(value):
                raise ConvergenceError(
                    "training diverged: loss %r at step %d" % (value, step),
                    iterations=step)
            T.backward(T.scale(loss, 1.0 / cfg.batch_size))
            step_loss += value / cfg.batch_size
        opt.lr = _lr_at(cfg, step)
        opt.step()
        history.append(step_loss)
        if progress is not None:
            progress(step, step_loss)
        if (cfg.checkpoint_path and cfg.checkpoint_every
                and (step + 1) % cfg.checkpoint_every == 0):
            save_weights(weights, cfg.checkpoint_path)
    if cfg.checkpoint_path:
        save_weights(weights, cfg.checkpoint_path)
    return weights, history
