"""Experiment harness: the (m, epsilon) sweep, metrics, and reports.

A sweep evaluates one private style dataset across a grid of subsample
sizes and privacy budgets. Every cell releases a noisy token centroid,
generates a fixed number of samples (repetition r reuses the same sampling
seed in every cell, so cells are visually comparable), and records the
encoder-space style score plus how far the released token drifted from the
clean centroid. The whole sweep is a pure function of (config, master
seed): rerunning it reproduces results.csv byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .adaptation import (
    ImageEncoder,
    adapt_conditioning,
    build_ti_embedding_set,
    encode_image,
    fit_encoder,
    load_encoder,
    TokenTrainConfig,
)
from .aggregation import EmbeddingSet, NoisyCentroid, centroid, release
from .datasets import StyleDataset, make_style_dataset
from .denoiser import DenoiserModel, ddim_sample, load_checkpoint
from .diffusion import ImageTensor, make_schedule
from .images import compose_grid, to_uint8, write_pgm, write_png
from .privacy import PrivacyBudget
from .rng import derive_seed
from .store import read_store

THREAD_ENV_VAR = "DPEMBED_THREADS"

CSV_COLUMNS = (
    "dataset",
    "n",
    "m",
    "epsilon",
    "delta",
    "seed",
    "sigma",
    "style_score_mean",
    "style_score_stderr",
    "embedding_drift",
    "status",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep cell: a (dataset, m, epsilon) point and its seeds.

    epsilon None means a noise-free release; adapt False means the
    no-adaptation baseline (token forced to zero), used as the reference
    the infinite-noise regime is compared against.
    """

    dataset: str
    n: int
    m: int | None
    epsilon: float | None
    delta: float
    seed: int
    prompt_id: int
    repetitions: int
    method: str = "classical"
    adapt: bool = True

    def __post_init__(self):
        if self.m is not None and not (1 <= self.m <= self.n):
            raise ValueError(f"m must lie in [1, {self.n}], got {self.m}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def epsilon_label(self) -> str:
        if not self.adapt:
            return "baseline"
        if self.epsilon is None:
            return "none"
        return repr(self.epsilon)

    def m_value(self) -> int:
        return self.n if self.m is None else self.m

    def sort_key(self) -> tuple:
        eps_rank = (
            (2, 0.0)
            if not self.adapt
            else (1, 0.0)
            if self.epsilon is None
            else (0, self.epsilon)
        )
        return (self.dataset, self.m_value(), eps_rank, self.seed)

    def cell_id(self) -> str:
        return f"{self.dataset}_m{self.m_value()}_eps{self.epsilon_label()}"


@dataclass(frozen=True)
class CellArtifacts:
    """Shared read-only inputs every cell consumes."""

    model: DenoiserModel
    encoder: ImageEncoder
    embeddings: EmbeddingSet
    dataset: StyleDataset
    master_seed: int
    sample_steps: int | None = None  # defaults to the model's training steps


@dataclass(frozen=True)
class SweepResult:
    config: ExperimentConfig
    sigma: float
    style_score_mean: float
    style_score_stderr: float
    embedding_drift: float
    samples: tuple
    wall_time: float
    status: str = "ok"
    sample_files: tuple = ()


def style_score(
    enc: ImageEncoder, generated: ImageTensor, target_set: StyleDataset
) -> float:
    """Cosine between E(generated) and the normalized clean set centroid."""
    target = _style_direction(enc, target_set)
    return float(encode_image(enc, generated).values @ target)


def _style_direction(enc: ImageEncoder, target_set: StyleDataset) -> np.ndarray:
    embs = np.stack([encode_image(enc, im).values for im in target_set.images])
    mean = embs.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise ValueError("target set has a zero mean embedding")
    return mean / norm


def run_cell(cfg: ExperimentConfig, art: CellArtifacts) -> SweepResult:
    """Release a token for this cell, sample, and score."""
    start = time.perf_counter()
    if len(art.embeddings) != cfg.n:
        raise ValueError(
            f"embedding store holds {len(art.embeddings)} members, config says {cfg.n}"
        )
    sched = make_schedule(art.sample_steps or art.model.schedule_steps)
    clean = centroid(art.embeddings)

    budget = None
    if cfg.epsilon is not None:
        budget = PrivacyBudget(epsilon=cfg.epsilon, delta=cfg.delta)
    released = release(
        art.embeddings, budget, cfg.m, seed=cfg.seed, method=cfg.method
    )
    if not cfg.adapt:
        released = NoisyCentroid(
            values=np.zeros(art.embeddings.dimension),
            calibration=None,
            subsample=None,
            seed=cfg.seed,
        )
    sigma = released.calibration.sigma if released.calibration else 0.0
    drift = float(np.linalg.norm(released.values - clean))

    y = adapt_conditioning(cfg.prompt_id, released, cond_dim=art.model.cond_dim)
    scores, samples = [], []
    for r in range(cfg.repetitions):
        sample_seed = derive_seed(art.master_seed, "sample", r)
        image = ddim_sample(art.model, y, sched, seed=sample_seed)
        samples.append(image)
        scores.append(style_score(art.encoder, image, art.dataset))
    mean = float(np.mean(scores))
    stderr = (
        float(np.std(scores, ddof=1) / np.sqrt(len(scores))) if len(scores) > 1 else 0.0
    )
    return SweepResult(
        config=cfg,
        sigma=sigma,
        style_score_mean=mean,
        style_score_stderr=stderr,
        embedding_drift=drift,
        samples=tuple(samples),
        wall_time=time.perf_counter() - start,
    )


def _run_cell_guarded(cfg: ExperimentConfig, art: CellArtifacts) -> SweepResult:
    try:
        return run_cell(cfg, art)
    except Exception as exc:  # cell failures are recorded, not dropped
        return SweepResult(
            config=cfg,
            sigma=float("nan"),
            style_score_mean=float("nan"),
            style_score_stderr=float("nan"),
            embedding_drift=float("nan"),
            samples=(),
            wall_time=0.0,
            status=f"error: {exc}",
        )


def max_parallelism() -> int:
    cap = os.environ.get(THREAD_ENV_VAR)
    if cap is None:
        return os.cpu_count() or 1
    return max(1, int(cap))


def run_sweep(grid, art: CellArtifacts, jobs: int = 1) -> list:
    """Run every cell; results are ordered by config key, not arrival.

    Cells are independent; `jobs` processes execute them concurrently,
    capped by the DPEMBED_THREADS environment variable.
    """
    cells = sorted(grid, key=ExperimentConfig.sort_key)
    jobs = max(1, min(jobs, max_parallelism()))
    if jobs == 1 or len(cells) <= 1:
        return [_run_cell_guarded(cfg, art) for cfg in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_guarded, cells, [art] * len(cells)))


def _format_metric(value: float) -> str:
    return "" if not np.isfinite(value) else repr(value)


def report(results, out_dir) -> dict:
    """Write results.csv, grid images, samples, and the manifest.

    The reporter is the single writer of output files. Returns the manifest
    dictionary (also written as manifest.json).
    """
    if not results:
        raise ValueError("no results to report")
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    samples_dir = os.path.join(out_dir, "samples")
    os.makedirs(samples_dir, exist_ok=True)

    results = sorted(results, key=lambda r: r.config.sort_key())
    csv_path = os.path.join(out_dir, "results.csv")
    try:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for res in results:
                cfg = res.config
                writer.writerow(
                    [
                        cfg.dataset,
                        cfg.n,
                        cfg.m_value(),
                        cfg.epsilon_label(),
                        repr(cfg.delta),
                        cfg.seed,
                        _format_metric(res.sigma),
                        _format_metric(res.style_score_mean),
                        _format_metric(res.style_score_stderr),
                        _format_metric(res.embedding_drift),
                        res.status,
                    ]
                )
    except OSError as exc:
        raise OSError(f"failed writing {csv_path}: {exc}") from exc

    manifest_cells = []
    reported = []
    for res in results:
        cfg = res.config
        refs = []
        if res.samples:
            path = os.path.join(samples_dir, f"{cfg.cell_id()}_r0.png")
            write_png(path, _image_bytes(res.samples[0]))
            refs.append(os.path.relpath(path, out_dir))
        reported.append(replace(res, sample_files=tuple(refs)))
        manifest_cells.append(
            {
                "id": cfg.cell_id(),
                "config": _config_dict(cfg),
                "hash": _config_hash(cfg),
                "samples": refs,
                "status": res.status,
            }
        )

    for dataset in sorted({r.config.dataset for r in results}):
        _write_grid(
            [r for r in reported if r.config.dataset == dataset], dataset, out_dir
        )

    manifest = {
        "cells": manifest_cells,
        "sweep_hash": hashlib.sha256(
            json.dumps([c["hash"] for c in manifest_cells]).encode()
        ).hexdigest(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _image_bytes(image: ImageTensor) -> np.ndarray:
    return to_uint8(image.grid())


def _config_dict(cfg: ExperimentConfig) -> dict:
    return {
        "dataset": cfg.dataset,
        "n": cfg.n,
        "m": cfg.m,
        "epsilon": cfg.epsilon,
        "delta": cfg.delta,
        "seed": cfg.seed,
        "prompt_id": cfg.prompt_id,
        "repetitions": cfg.repetitions,
        "method": cfg.method,
        "adapt": cfg.adapt,
    }


def _config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(
        json.dumps(_config_dict(cfg), sort_keys=True).encode()
    ).hexdigest()


def _write_grid(results, dataset: str, out_dir: str) -> None:
    """Image grid: rows are m values ascending, columns epsilon ascending
    (noise-free last); baseline cells are not part of the grid."""
    cells = [r for r in results if r.config.adapt and r.samples]
    if not cells:
        return
    m_values = sorted({r.config.m_value() for r in cells})
    eps_ranks = sorted(
        {(r.config.epsilon is None, r.config.epsilon or 0.0) for r in cells}
    )
    lookup = {
        (r.config.m_value(), (r.config.epsilon is None, r.config.epsilon or 0.0)): r
        for r in cells
    }
    rows = []
    for m in m_values:
        row = []
        for rank in eps_ranks:
            res = lookup.get((m, rank))
            row.append(res.samples[0] if res else None)
        rows.append(row)
    grid = compose_grid(rows)
    write_pgm(os.path.join(out_dir, f"grid_{dataset}.ppm"), grid)
    write_png(os.path.join(out_dir, f"grid_{dataset}.png"), grid)


def _load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _resolve_delta(privacy_cfg: dict, n: int) -> float:
    delta = privacy_cfg.get("delta", "one_over_n")
    if delta == "one_over_n":
        return 1.0 / n
    return float(delta)


def build_grid(config: dict, master_seed: int) -> list:
    """Expand a parsed sweep config into the list of cells."""
    ds = config["dataset"]
    grid_cfg = config["grid"]
    privacy_cfg = config.get("privacy", {})
    n = int(ds["n"])
    dataset_name = f"{ds['family']}-{n}-{int(ds['seed'])}"
    delta = _resolve_delta(privacy_cfg, n)
    method = privacy_cfg.get("method", "classical")
    prompt_id = int(grid_cfg.get("prompt_id", 0))
    repetitions = int(grid_cfg.get("repetitions", 20))

    ms = [int(m) for m in grid_cfg.get("ms", [])]
    if grid_cfg.get("include_full_m", True):
        ms.append(n)
    epsilons: list = [float(e) for e in grid_cfg.get("epsilons", [])]
    if grid_cfg.get("include_no_noise", True):
        epsilons.append(None)

    cells = []
    for m in sorted(set(ms)):
        for eps in epsilons:
            cfg = ExperimentConfig(
                dataset=dataset_name,
                n=n,
                m=None if m == n else m,
                epsilon=eps,
                delta=delta,
                seed=0,
                prompt_id=prompt_id,
                repetitions=repetitions,
                method=method,
            )
            cells.append(replace(cfg, seed=derive_seed(master_seed, "cell", cfg.cell_id())))
    if grid_cfg.get("include_baseline", True):
        cfg = ExperimentConfig(
            dataset=dataset_name,
            n=n,
            m=None,
            epsilon=None,
            delta=delta,
            seed=0,
            prompt_id=prompt_id,
            repetitions=repetitions,
            method=method,
            adapt=False,
        )
        cells.append(replace(cfg, seed=derive_seed(master_seed, "cell", cfg.cell_id())))
    return cells


def prepare_artifacts(config: dict, master_seed: int) -> CellArtifacts:
    """Materialize the model, encoder, dataset, and TI store for a sweep.

    The TI embedding store and encoder are built once and shared by every
    cell, mirroring the fixed-seed comparison protocol: only the release
    noise and subsample differ across cells.
    """
    ds = config["dataset"]
    dataset = make_style_dataset(ds["family"], int(ds["n"]), int(ds["seed"]))

    model_cfg = config["model"]
    model, _ = load_checkpoint(model_cfg["checkpoint"])
    sample_steps = model_cfg.get("sample_steps")
    sched = make_schedule(model.schedule_steps)

    enc_cfg = config.get("encoder", {})
    if "path" in enc_cfg:
        encoder = load_encoder(enc_cfg["path"])
    else:
        pool_specs = enc_cfg.get(
            "pool", [["strokes", 128, 1001], ["glyphs", 128, 1002]]
        )
        pool = []
        for family, count, seed in pool_specs:
            pool.extend(make_style_dataset(str(family), int(count), int(seed)).images)
        encoder = fit_encoder(pool, int(enc_cfg.get("dim", 32)))

    emb_cfg = config.get("embeddings", {})
    if "path" in emb_cfg:
        embeddings, _ = read_store(emb_cfg["path"])
    else:
        token_cfg = TokenTrainConfig(
            steps=int(emb_cfg.get("steps", TokenTrainConfig.steps)),
            lr=float(emb_cfg.get("lr", TokenTrainConfig.lr)),
            batch=int(emb_cfg.get("batch", TokenTrainConfig.batch)),
            population=int(emb_cfg.get("population", TokenTrainConfig.population)),
        )
        prompt_id = int(config["grid"].get("prompt_id", 0))
        embeddings, _ = build_ti_embedding_set(
            model,
            dataset.images,
            prompt_id,
            sched,
            token_cfg,
            seed=derive_seed(master_seed, "embeddings"),
        )
    return CellArtifacts(
        model=model,
        encoder=encoder,
        embeddings=embeddings,
        dataset=dataset,
        master_seed=master_seed,
        sample_steps=int(sample_steps) if sample_steps else None,
    )


def run_sweep_from_config(path, out_dir, jobs: int = 1, master_seed: int = 0) -> dict:
    """Full sweep entry point: parse, build artifacts, run, report."""
    config = _load_toml(path)
    cells = build_grid(config, master_seed)
    art = prepare_artifacts(config, master_seed)
    results = run_sweep(cells, art, jobs=jobs)
    return report(results, out_dir)
