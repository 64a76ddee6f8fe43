"""Adaptation paths: per-image token inversion and encoder-space guidance.

Token inversion trains, for one image at a time, the additive token u that
minimizes the frozen denoiser's noise-prediction error when u enters the
conditioning vector. Each image's token sees only that image, which is what
lets the aggregate release bound per-record influence.

Guidance instead steers the reverse diffusion by the gradient of a cosine
loss between a target embedding and the linear image encoder's embedding of
the current clean-image estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import Embedding, EmbeddingSet, NoisyCentroid, normalize
from .conditioning import base_conditioning
from .denoiser import (
    DenoiserModel,
    _assemble_input,
    _backward_batch,
    _forward_batch,
    Adam,
    TIME_DIM,
    denoiser_forward,
)
from .diffusion import DiffusionSchedule, ImageTensor, predict_x0
from .rng import derive_seed, stream


@dataclass(frozen=True)
class ImageEncoder:
    """Linear image encoder with orthonormal rows; E(x) = Mx / ||Mx||."""

    matrix: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.float64)
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)
        if matrix.ndim != 2 or matrix.shape[1] != self.height * self.width:
            raise ValueError("encoder matrix shape does not match image size")
        gram = matrix @ matrix.T
        if not np.allclose(gram, np.eye(matrix.shape[0]), atol=1e-8):
            raise ValueError("encoder rows must be orthonormal")

    @property
    def embed_dim(self) -> int:
        return self.matrix.shape[0]


def fit_encoder(public_pool, embed_dim: int, seed: int = 0) -> ImageEncoder:
    """Principal directions of the centered pool as encoder rows.

    The fit is a deterministic function of the pool (SVD with a fixed sign
    convention); `seed` is accepted for interface uniformity with the other
    fitting routines. A pool whose centered rank is below `embed_dim` is
    rejected.
    """
    images = list(public_pool)
    if len(images) < embed_dim:
        raise ValueError(f"pool of {len(images)} images cannot support d={embed_dim}")
    height, width = images[0].height, images[0].width
    x = np.stack([im.pixels for im in images])
    x = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    if embed_dim > s.size or s[embed_dim - 1] <= 1e-10 * max(s[0], 1.0):
        raise ValueError(f"pool is degenerate: rank < {embed_dim}")
    m = vt[:embed_dim]
    # fixed sign convention: the largest-magnitude entry of each row is positive
    for row in range(embed_dim):
        j = int(np.argmax(np.abs(m[row])))
        if m[row, j] < 0:
            m[row] = -m[row]
    return ImageEncoder(matrix=m, height=height, width=width)


def encode_image(enc: ImageEncoder, x: ImageTensor) -> Embedding:
    """Unit-norm encoder embedding of an image."""
    p = enc.matrix @ x.pixels
    return normalize(Embedding(values=p))


def save_encoder(path, enc: ImageEncoder) -> None:
    np.savez(path, matrix=enc.matrix, height=enc.height, width=enc.width)


def load_encoder(path) -> ImageEncoder:
    with np.load(path) as data:
        return ImageEncoder(
            matrix=data["matrix"],
            height=int(data["height"]),
            width=int(data["width"]),
        )


@dataclass(frozen=True)
class TokenEmbedding:
    """A learned per-image token with its training metadata."""

    values: np.ndarray
    source_label: str
    steps: int
    final_loss: float

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not np.all(np.isfinite(values)):
            raise ValueError("token values must be finite")


@dataclass(frozen=True)
class TokenTrainConfig:
    steps: int = 2_000
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 8
    population: int = 512


def _sample_population(
    image: ImageTensor, sched: DiffusionSchedule, count: int, seed: int
):
    """Fixed (t, eps, x_t) population the token objective is defined over."""
    ts = stream(seed, "t").integers(1, sched.steps + 1, size=count)
    eps = stream(seed, "eps").standard_normal((count, image.dimension))
    alphas = np.concatenate([[1.0], sched.alpha])
    a = alphas[ts][:, None]
    x_t = np.sqrt(a) * image.pixels + np.sqrt(1.0 - a) * eps
    return ts, eps, x_t


def _population_loss(model, x_t, eps, ts, y, sched) -> float:
    z = _assemble_input(model, x_t, y, ts, sched)
    out, _ = _forward_batch(model.weights, model.biases, z)
    return float(np.mean(np.sum((out - eps) ** 2, axis=1)))


def train_token_per_image(
    model: DenoiserModel,
    image: ImageTensor,
    prompt_id: int,
    sched: DiffusionSchedule,
    config: TokenTrainConfig = TokenTrainConfig(),
    seed: int = 0,
    source_label: str = "",
) -> TokenEmbedding:
    """Learn the token u for one image against a frozen model.

    A population of (t, eps) pairs is sampled up front from the seed; Adam
    then minimizes the empirical noise-prediction error over that population
    with respect to u only, starting from u = 0. Batches of `config.batch`
    rows are drawn per step (the full population when batch >= population).
    Deterministic given (model, image, config, seed); reads nothing but this
    image.
    """
    y0 = base_conditioning(prompt_id, model.cond_dim)
    ts, eps, x_t = _sample_population(image, sched, config.population, seed)
    u = np.zeros(model.cond_dim)
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    idx_rng = stream(seed, "batch")
    full_batch = config.batch >= config.population
    for step_i in range(config.steps):
        if full_batch:
            idx = slice(None)
            rows = config.population
        else:
            idx = idx_rng.integers(0, config.population, size=config.batch)
            rows = config.batch
        z = _assemble_input(model, x_t[idx], y0 + u, ts[idx], sched)
        out, cache = _forward_batch(model.weights, model.biases, z)
        resid = out - eps[idx]
        loss = float(np.mean(np.sum(resid**2, axis=1)))
        if not np.isfinite(loss):
            raise RuntimeError(
                f"token training diverged at step {step_i} (label {source_label!r})"
            )
        _, grad_z = _backward_batch(
            model.weights, model.biases, cache, 2.0 * resid / rows
        )
        grad_u = grad_z[:, model.image_dim + TIME_DIM :].sum(axis=0)
        (u,) = opt.step([u], [grad_u])
    final_loss = _population_loss(model, x_t, eps, ts, y0 + u, sched)
    return TokenEmbedding(
        values=u, source_label=source_label, steps=config.steps, final_loss=final_loss
    )


def token_objective(
    model: DenoiserModel,
    image: ImageTensor,
    prompt_id: int,
    sched: DiffusionSchedule,
    u: np.ndarray,
    config: TokenTrainConfig = TokenTrainConfig(),
    seed: int = 0,
) -> float:
    """The per-image token objective at a given u, over the seeded population."""
    y = base_conditioning(prompt_id, model.cond_dim) + np.asarray(u, dtype=np.float64)
    ts, eps, x_t = _sample_population(image, sched, config.population, seed)
    return _population_loss(model, x_t, eps, ts, y, sched)


def joint_token_objective(
    model, images, prompt_id, sched, u, config=TokenTrainConfig(), seed: int = 0
) -> float:
    """Mean token objective across a dataset at one shared u.

    Diagnostic for how far an aggregated token sits from the joint optimum;
    not part of the release pipeline.
    """
    losses = [
        token_objective(
            model, im, prompt_id, sched, u, config, derive_seed(seed, "joint", i)
        )
        for i, im in enumerate(images)
    ]
    return float(np.mean(losses))


def build_ti_embedding_set(
    model: DenoiserModel,
    dataset,
    prompt_id: int,
    sched: DiffusionSchedule,
    config: TokenTrainConfig = TokenTrainConfig(),
    seed: int = 0,
    labels=None,
) -> tuple[EmbeddingSet, dict]:
    """Train one token per image and assemble the normalized embedding set.

    Per-image trainings use independent seed streams derived from `seed` and
    the member index. Any per-image failure aborts the build: a partial set
    would silently change the member count and with it the calibrated noise.

    Returns (set, info) where info records pre-normalization norms and final
    losses for the store trailer.
    """
    images = list(dataset)
    if labels is None:
        labels = [str(i) for i in range(len(images))]
    members, prenorm, losses = [], [], []
    for i, (label, image) in enumerate(zip(labels, images)):
        token = train_token_per_image(
            model,
            image,
            prompt_id,
            sched,
            config,
            seed=derive_seed(seed, "ti", i),
            source_label=label,
        )
        prenorm.append(float(np.linalg.norm(token.values)))
        losses.append(token.final_loss)
        members.append(normalize(Embedding(values=token.values)))
    info = {"prenorm_norms": prenorm, "final_losses": losses, "prompt_id": prompt_id}
    return EmbeddingSet(members=tuple(members), source_labels=tuple(labels)), info


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance weight and the (encoder-space) target embedding."""

    weight: float
    target: NoisyCentroid

    def __post_init__(self):
        if not (self.weight >= 0 and np.isfinite(self.weight)):
            raise ValueError(f"guidance weight must be >= 0, got {self.weight}")


def _cosine_loss_grad(target: np.ndarray, p: np.ndarray):
    """Gradient of -<a, b> with a = target/|target|, b = p/|p|, w.r.t. p."""
    tn = float(np.linalg.norm(target))
    pn = float(np.linalg.norm(p))
    if tn == 0.0:
        raise ValueError("guidance target must be nonzero")
    if pn == 0.0:
        raise ValueError("encoder projection of the clean estimate is zero")
    a = target / tn
    b = p / pn
    return -(a - float(a @ b) * b) / pn


def guided_eps(
    model: DenoiserModel,
    enc: ImageEncoder,
    cfg: GuidanceConfig,
    x_t: ImageTensor,
    y: np.ndarray,
    t: int,
    sched: DiffusionSchedule,
) -> np.ndarray:
    """Noise prediction steered toward the guidance target.

    Computes eps = model(x_t, y, t), forms the clean estimate x0_hat, and
    adds w * sqrt(1 - a_t) times the gradient of the cosine loss between the
    target and E(x0_hat) with respect to x_t. The gradient treats eps as
    constant in x_t (the frozen-eps surrogate), so d x0_hat / d x_t is the
    scalar 1/sqrt(a_t). With weight 0 the model output is returned exactly.
    """
    eps = denoiser_forward(model, x_t, y, t, sched)
    if cfg.weight == 0.0:
        return eps
    if cfg.target.dimension != enc.embed_dim:
        raise ValueError(
            f"guidance target dimension {cfg.target.dimension} does not match "
            f"encoder ({enc.embed_dim})"
        )
    a_t = sched.alpha_bar(t)
    x0_hat = predict_x0(x_t, eps, t, sched)
    p = enc.matrix @ x0_hat.pixels
    grad_p = _cosine_loss_grad(cfg.target.values, p)
    grad_x0 = enc.matrix.T @ grad_p
    grad_xt = grad_x0 / np.sqrt(a_t)
    return eps + cfg.weight * np.sqrt(1.0 - a_t) * grad_xt


def adapt_conditioning(
    prompt_id: int, token: NoisyCentroid, cond_dim: int | None = None
) -> np.ndarray:
    """Conditioning vector for a prompt carrying a released token.

    Pass the model's conditioning dimension to have a mismatched token
    rejected here instead of at the first forward pass.
    """
    if cond_dim is not None and token.dimension != cond_dim:
        raise ValueError(
            f"token dimension {token.dimension} does not match cond_dim {cond_dim}"
        )
    y = base_conditioning(prompt_id, cond_dim=token.dimension)
    return y + token.values
