"""Fully-connected noise predictor with exact hand-written gradients.

The network maps concat(x_t, time_features, y) through tanh hidden layers to
a noise estimate of the image dimension; the output layer is bias-free so a
zero-weight model predicts exactly zero. Forward and backward passes accept
batches, and the backward pass returns exact gradients with respect to the
parameters, the image input, and the conditioning vector, which the token
trainer and guided sampler rely on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .diffusion import DiffusionSchedule, ImageTensor, ddim_step
from .rng import stream

TIME_DIM = 8
ACTIVATION_IDS = {"tanh": 0}

CHECKPOINT_MAGIC = b"DPDM"
CHECKPOINT_VERSION = 1


def time_embedding(t, steps: int) -> np.ndarray:
    """Sinusoidal features of the normalized step t/steps.

    Four octave frequencies, sine and cosine each, giving TIME_DIM features.
    Accepts a scalar (returns (TIME_DIM,)) or a vector (returns (B, TIME_DIM)).
    """
    s = np.asarray(t, dtype=np.float64) / steps
    freqs = np.pi * (2.0 ** np.arange(TIME_DIM // 2))
    angles = np.multiply.outer(s, freqs)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


@dataclass(frozen=True)
class DenoiserModel:
    """MLP noise predictor plus its architecture descriptor."""

    weights: tuple  # one (out, in) matrix per layer
    biases: tuple  # one (out,) vector per hidden layer, None for the output
    image_dim: int
    cond_dim: int
    hidden: tuple
    height: int
    width: int
    schedule_steps: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATION_IDS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        sizes = self.layer_sizes()
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("weight/bias count does not match architecture")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (sizes[i + 1], sizes[i])
            if w.shape != expect:
                raise ValueError(f"layer {i} weight shape {w.shape} != {expect}")
            last = i == len(self.weights) - 1
            if last and b is not None:
                raise ValueError("output layer must be bias-free")
            if not last and (b is None or b.shape != (sizes[i + 1],)):
                raise ValueError(f"layer {i} bias shape mismatch")
            if not np.all(np.isfinite(w)) or (b is not None and not np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    def layer_sizes(self) -> list:
        return [self.input_dim, *self.hidden, self.image_dim]

    @property
    def input_dim(self) -> int:
        return self.image_dim + TIME_DIM + self.cond_dim

    def parameter_list(self) -> list:
        """Flat parameter list (weights interleaved with present biases)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            if b is not None:
                out.append(b)
        return out

    def with_parameters(self, params: list) -> "DenoiserModel":
        """Rebuild the model from a flat parameter list (inverse of parameter_list)."""
        weights, biases = [], []
        it = iter(params)
        for b in self.biases:
            weights.append(next(it))
            biases.append(next(it) if b is not None else None)
        return replace(self, weights=tuple(weights), biases=tuple(biases))


def init_model(
    image_dim: int,
    cond_dim: int,
    height: int,
    width: int,
    schedule_steps: int,
    hidden: tuple = (128, 128),
    seed: int = 0,
) -> DenoiserModel:
    """Random model: weights N(0, 1/fan_in), biases zero."""
    if image_dim != height * width:
        raise ValueError("image_dim must equal height*width")
    sizes = [image_dim + TIME_DIM + cond_dim, *hidden, image_dim]
    rng = stream(seed, "init")
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        weights.append(rng.standard_normal((sizes[i + 1], fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(sizes[i + 1]) if i < len(sizes) - 2 else None)
    return DenoiserModel(
        weights=tuple(weights),
        biases=tuple(biases),
        image_dim=image_dim,
        cond_dim=cond_dim,
        hidden=tuple(hidden),
        height=height,
        width=width,
        schedule_steps=schedule_steps,
    )


def _split_params(params: list, has_bias: list):
    """Split a flat parameter list back into per-layer weights and biases."""
    weights, biases = [], []
    it = iter(params)
    for hb in has_bias:
        weights.append(next(it))
        biases.append(next(it) if hb else None)
    return weights, biases


def _assemble_input(model, x: np.ndarray, y: np.ndarray, t, sched) -> np.ndarray:
    temb = time_embedding(t, sched.steps)
    if x.ndim == 1:
        return np.concatenate([x, temb, y])
    if y.ndim == 1:
        y = np.broadcast_to(y, (x.shape[0], y.size))
    if temb.ndim == 1:
        temb = np.broadcast_to(temb, (x.shape[0], temb.size))
    return np.concatenate([x, temb, y], axis=1)


def _forward_batch(weights, biases, z: np.ndarray):
    """Batched forward pass; returns (output, activation cache)."""
    cache = [z]
    h = z
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w.T
        if b is not None:
            h = h + b
        if i != last:
            h = np.tanh(h)
        cache.append(h)
    return h, cache


def _backward_batch(weights, biases, cache: list, upstream: np.ndarray):
    """Exact gradients of sum_rows <upstream_row, output_row>.

    Returns (param_grads, grad_z) where param_grads matches parameter_list
    order (summed over the batch) and grad_z has the batch input shape.
    """
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    delta = upstream
    for i in range(len(weights) - 1, -1, -1):
        h_in = cache[i]
        if i != len(weights) - 1:
            delta = delta * (1.0 - cache[i + 1] ** 2)  # tanh'
        grads_w[i] = delta.T @ h_in
        if biases[i] is not None:
            grads_b[i] = delta.sum(axis=0)
        delta = delta @ weights[i]
    params = []
    for gw, gb in zip(grads_w, grads_b):
        params.append(gw)
        if gb is not None:
            params.append(gb)
    return params, delta


def denoiser_forward(
    model: DenoiserModel,
    x_t: ImageTensor,
    y: np.ndarray,
    t: int,
    sched: DiffusionSchedule,
) -> np.ndarray:
    """Predicted noise for a single image; deterministic in its inputs."""
    _check_shapes(model, x_t, y)
    z = _assemble_input(model, x_t.pixels, np.asarray(y, dtype=np.float64), t, sched)
    out, _ = _forward_batch(model.weights, model.biases, z[None, :])
    return out[0]


def denoiser_backward(
    model: DenoiserModel,
    x_t: ImageTensor,
    y: np.ndarray,
    t: int,
    sched: DiffusionSchedule,
    upstream: np.ndarray,
):
    """Gradients of <upstream, denoiser_forward(...)>.

    Returns (param_grads, grad_x, grad_y) with param_grads in
    parameter_list order.
    """
    _check_shapes(model, x_t, y)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (model.image_dim,):
        raise ValueError(f"upstream must have shape ({model.image_dim},)")
    z = _assemble_input(model, x_t.pixels, np.asarray(y, dtype=np.float64), t, sched)
    _, cache = _forward_batch(model.weights, model.biases, z[None, :])
    param_grads, grad_z = _backward_batch(
        model.weights, model.biases, cache, upstream[None, :]
    )
    grad_x = grad_z[0, : model.image_dim]
    grad_y = grad_z[0, model.image_dim + TIME_DIM :]
    return param_grads, grad_x, grad_y


def _check_shapes(model: DenoiserModel, x_t: ImageTensor, y) -> None:
    if x_t.dimension != model.image_dim:
        raise ValueError(
            f"image dimension {x_t.dimension} does not match model ({model.image_dim})"
        )
    y = np.asarray(y)
    if y.shape != (model.cond_dim,):
        raise ValueError(f"conditioning must have shape ({model.cond_dim},)")


class Adam:
    """Adam over a flat list of parameter arrays."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: list, grads: list) -> list:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    batch: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    hidden: tuple = (128, 128)
    # cosine-decay the learning rate to zero over the run; stationary
    # minibatch noise otherwise leaves the parameters wandering in a ball
    # around the optimum
    lr_decay: bool = False


def _content_key(image: ImageTensor, y: np.ndarray) -> bytes:
    return image.pixels.tobytes() + np.asarray(y, dtype=np.float64).tobytes()


def train_denoiser(
    dataset,
    sched: DiffusionSchedule,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    on_step=None,
) -> DenoiserModel:
    """Train the noise predictor on (image, conditioning) pairs.

    Each step draws a batch of examples by index from a seeded stream, a
    uniform timestep in [1, T] and fresh Gaussian noise per example, and
    minimizes the mean squared error between the true and predicted noise
    with Adam. The dataset is put into a canonical content order first, so
    training is invariant to the caller's ordering. Deterministic given
    (dataset contents, sched, config, seed).

    `on_step(step, loss)` is called once per step when provided.
    """
    pairs = [(img, np.asarray(y, dtype=np.float64)) for img, y in dataset]
    if not pairs:
        raise ValueError("training dataset must be nonempty")
    pairs.sort(key=lambda p: _content_key(*p))
    height, width = pairs[0][0].height, pairs[0][0].width
    image_dim = pairs[0][0].dimension
    cond_dim = pairs[0][1].size
    if any(im.dimension != image_dim or y.size != cond_dim for im, y in pairs):
        raise ValueError("dataset images/conditionings must share dimensions")

    images = np.stack([p[0].pixels for p in pairs])
    conds = np.stack([p[1] for p in pairs])
    model = init_model(
        image_dim, cond_dim, height, width, sched.steps, config.hidden, seed
    )
    params = model.parameter_list()
    has_bias = [b is not None for b in model.biases]
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    idx_rng = stream(seed, "batch")
    t_rng = stream(seed, "t")
    eps_rng = stream(seed, "eps")
    alphas = np.concatenate([[1.0], sched.alpha])

    n = len(pairs)
    for step_i in range(config.steps):
        idx = idx_rng.integers(0, n, size=config.batch)
        ts = t_rng.integers(1, sched.steps + 1, size=config.batch)
        eps = eps_rng.standard_normal((config.batch, image_dim))
        a = alphas[ts][:, None]
        x_t = np.sqrt(a) * images[idx] + np.sqrt(1.0 - a) * eps
        z = _assemble_input(model, x_t, conds[idx], ts, sched)
        weights, biases = _split_params(params, has_bias)
        out, cache = _forward_batch(weights, biases, z)
        resid = out - eps
        loss = float(np.mean(np.sum(resid**2, axis=1)))
        if not np.isfinite(loss):
            raise RuntimeError(
                f"training diverged at step {step_i}: loss became non-finite"
            )
        grads, _ = _backward_batch(weights, biases, cache, 2.0 * resid / config.batch)
        if config.lr_decay:
            opt.lr = config.lr * 0.5 * (1.0 + np.cos(np.pi * step_i / config.steps))
        params = opt.step(params, grads)
        if on_step is not None:
            on_step(step_i, loss)
    return model.with_parameters(params)


def ddim_sample(
    model: DenoiserModel | None,
    y: np.ndarray,
    sched: DiffusionSchedule,
    seed: int,
    eps_fn=None,
    height: int | None = None,
    width: int | None = None,
) -> ImageTensor:
    """Deterministic DDIM sampling from seeded Gaussian noise.

    Starts from x_T ~ N(0, I) drawn from the (seed, "sample-init") stream
    and walks t = T..1, predicting noise with the model or, when given,
    with `eps_fn(x_t, t)` (the guidance hook). The final image is clamped
    to [-1, 1]; intermediate states are never clamped. Non-finite
    intermediates abort.
    """
    if model is not None:
        height = model.height if height is None else height
        width = model.width if width is None else width
    if height is None or width is None:
        raise ValueError("height/width are required when no model is given")
    dim = height * width
    if eps_fn is None:
        if model is None:
            raise ValueError("either a model or an eps_fn is required")

        def eps_fn(x_t, t):
            return denoiser_forward(model, x_t, y, t, sched)

    x = ImageTensor(
        pixels=stream(seed, "sample-init").standard_normal(dim),
        height=height,
        width=width,
    )
    for t in range(sched.steps, 0, -1):
        eps_hat = np.asarray(eps_fn(x, t), dtype=np.float64)
        if not np.all(np.isfinite(eps_hat)):
            raise RuntimeError(f"non-finite noise prediction at step {t}")
        x = ddim_step(x, eps_hat, t, sched)
    return ImageTensor(pixels=np.clip(x.pixels, -1.0, 1.0), height=height, width=width)


def save_checkpoint(
    path, model: DenoiserModel, trailer: dict | None = None
) -> None:
    """Write a model checkpoint (parameters as float32 little-endian)."""
    descriptor = {
        "layer_sizes": model.layer_sizes(),
        "activation": ACTIVATION_IDS[model.activation],
        "cond_dim": model.cond_dim,
        "image_dim": model.image_dim,
        "time_dim": TIME_DIM,
        "height": model.height,
        "width": model.width,
        "schedule_steps": model.schedule_steps,
    }
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(desc)))
        fh.write(desc)
        for p in model.parameter_list():
            fh.write(p.astype("<f4").tobytes(order="C"))
        fh.write(json.dumps(trailer or {}, sort_keys=True).encode("utf-8"))


def load_checkpoint(path) -> tuple[DenoiserModel, dict]:
    """Read a checkpoint; returns (model, trailer)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version, desc_len = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 10
    descriptor = json.loads(raw[offset : offset + desc_len].decode("utf-8"))
    offset += desc_len
    act_names = {v: k for k, v in ACTIVATION_IDS.items()}
    if descriptor["activation"] not in act_names:
        raise ValueError(f"{path}: unknown activation id {descriptor['activation']}")
    sizes = descriptor["layer_sizes"]
    hidden = tuple(sizes[1:-1])
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        count = sizes[i + 1] * sizes[i]
        w = np.frombuffer(raw[offset : offset + 4 * count], dtype="<f4")
        if w.size != count:
            raise ValueError(f"{path}: checkpoint parameters truncated")
        offset += 4 * count
        weights.append(w.reshape(sizes[i + 1], sizes[i]).astype(np.float64))
        if i < len(sizes) - 2:
            b = np.frombuffer(raw[offset : offset + 4 * sizes[i + 1]], dtype="<f4")
            offset += 4 * sizes[i + 1]
            biases.append(b.astype(np.float64))
        else:
            biases.append(None)
    trailer = json.loads(raw[offset:].decode("utf-8")) if raw[offset:] else {}
    model = DenoiserModel(
        weights=tuple(weights),
        biases=tuple(biases),
        image_dim=descriptor["image_dim"],
        cond_dim=descriptor["cond_dim"],
        hidden=hidden,
        height=descriptor["height"],
        width=descriptor["width"],
        schedule_steps=descriptor["schedule_steps"],
        activation=act_names[descriptor["activation"]],
    )
    return model, trailer
