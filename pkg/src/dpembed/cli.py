"""Command-line interface.

Subcommands cover the pipeline end to end: calibrate noise, train the base
model, build per-image token embeddings, aggregate them under a privacy
budget, generate images (optionally encoder-guided), and run full sweeps.
Dataset arguments use the compact spec "family:n:seed[:prompt_id]".
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .adaptation import (
    GuidanceConfig,
    adapt_conditioning,
    build_ti_embedding_set,
    encode_image,
    fit_encoder,
    guided_eps,
    load_encoder,
    save_encoder,
    TokenTrainConfig,
)
from .aggregation import Embedding, EmbeddingSet, NoisyCentroid, release
from .conditioning import base_conditioning
from .datasets import make_style_dataset
from .denoiser import (
    TrainConfig,
    ddim_sample,
    load_checkpoint,
    save_checkpoint,
    train_denoiser,
)
from .diffusion import make_schedule
from .harness import run_sweep_from_config
from .images import write_image
from .privacy import (
    PrivacyBudget,
    SubsampleConfig,
    calibrate_classical,
    calibrate_numeric,
    invert_amplification,
)
from .store import read_store, write_store


def _parse_dataset_spec(spec: str, with_prompt: bool = False):
    parts = spec.split(":")
    expect = 4 if with_prompt else 3
    if len(parts) not in (3, expect):
        raise argparse.ArgumentTypeError(
            f"dataset spec must be family:n:seed{'[:prompt_id]' if with_prompt else ''},"
            f" got {spec!r}"
        )
    family, n, seed = parts[0], int(parts[1]), int(parts[2])
    prompt = int(parts[3]) if len(parts) == 4 else 0
    return (family, n, seed, prompt) if with_prompt else (family, n, seed)


def _cmd_calibrate(args) -> int:
    budget = PrivacyBudget(epsilon=args.epsilon, delta=args.delta)
    count = args.population
    base = budget
    if args.sample is not None and args.sample < args.population:
        cfg = SubsampleConfig(population=args.population, sample=args.sample)
        base = invert_amplification(budget, cfg)
        count = args.sample
    calibrate = calibrate_numeric if args.method == "numeric" else calibrate_classical
    cal = calibrate(base, args.sensitivity, count)
    record = {
        "sigma": cal.sigma,
        "base_epsilon": base.epsilon,
        "base_delta": base.delta,
        "count": count,
        "sensitivity": args.sensitivity,
        "method": args.method,
    }
    if args.json:
        print(json.dumps(record, sort_keys=True))
    else:
        print(
            f"sigma={cal.sigma:.9g} base_epsilon={base.epsilon:.9g} "
            f"base_delta={base.delta:.9g} count={count} method={args.method}"
        )
    return 0


def _cmd_aggregate(args) -> int:
    embeddings, _ = read_store(args.input)
    budget = None
    if args.epsilon is not None:
        if args.delta is None:
            raise ValueError("--delta is required when --epsilon is given")
        budget = PrivacyBudget(epsilon=args.epsilon, delta=args.delta)
    out = release(embeddings, budget, args.sample, seed=args.seed, method=args.method)
    meta = {
        "release": {
            "epsilon": args.epsilon,
            "delta": args.delta if budget else None,
            "sigma": out.calibration.sigma if out.calibration else 0.0,
            "m": args.sample,
            "n": len(embeddings),
            "seed": args.seed,
            "method": args.method,
        }
    }
    released_set = EmbeddingSet(
        members=(Embedding(values=out.values),), source_labels=("released_centroid",)
    )
    write_store(args.output, released_set, extra=meta)
    print(
        f"released centroid -> {args.output} "
        f"(sigma={meta['release']['sigma']:.6g}, n={len(embeddings)}, m={args.sample})"
    )
    return 0


def _cmd_train_base(args) -> int:
    pairs = []
    parts = []
    for family, n, seed, prompt in args.dataset:
        ds = make_style_dataset(family, n, seed)
        y = base_conditioning(prompt)
        pairs.extend((image, y) for image in ds.images)
        parts.append(f"{ds.name}@{prompt}")
    sched = make_schedule(args.schedule_steps)
    config = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr)
    recent = []

    def on_step(step, loss):
        recent.append(loss)
        if len(recent) > 100:
            recent.pop(0)
        if args.verbose and (step + 1) % 1000 == 0:
            print(f"step {step + 1}/{args.steps}: loss {np.mean(recent):.4f}")

    model = train_denoiser(pairs, sched, config, seed=args.seed, on_step=on_step)
    trailer = {
        "train_config": {
            "steps": args.steps,
            "batch": args.batch,
            "lr": args.lr,
            "datasets": parts,
        },
        "seed": args.seed,
        "final_loss": float(np.mean(recent)) if recent else None,
    }
    save_checkpoint(args.out, model, trailer)
    print(f"trained on {len(pairs)} images -> {args.out} "
          f"(final loss {trailer['final_loss']:.4f})")
    return 0


def _cmd_embed_ti(args) -> int:
    model, _ = load_checkpoint(args.model)
    family, n, seed = args.dataset
    ds = make_style_dataset(family, n, seed)
    sched = make_schedule(model.schedule_steps)
    config = TokenTrainConfig(
        steps=args.steps, batch=args.batch, population=args.population
    )
    embeddings, info = build_ti_embedding_set(
        model, ds.images, args.prompt_id, sched, config, seed=args.seed
    )
    write_store(args.out, embeddings, extra={"ti": info, "dataset": ds.name})
    print(f"trained {len(embeddings)} token embeddings -> {args.out}")
    return 0


def _cmd_embed_encoder(args) -> int:
    pool = []
    for family, n, seed in args.pool:
        pool.extend(make_style_dataset(family, n, seed).images)
    encoder = fit_encoder(pool, args.dim)
    family, n, seed = args.dataset
    ds = make_style_dataset(family, n, seed)
    members = tuple(encode_image(encoder, image) for image in ds.images)
    labels = tuple(f"{ds.name}/{i}" for i in range(len(members)))
    write_store(
        args.out,
        EmbeddingSet(members=members, source_labels=labels),
        extra={"encoder_dim": args.dim, "dataset": ds.name},
    )
    if args.save_encoder:
        save_encoder(args.save_encoder, encoder)
        print(f"encoder saved -> {args.save_encoder}")
    print(f"encoded {len(members)} images -> {args.out}")
    return 0


def _cmd_generate(args) -> int:
    model, _ = load_checkpoint(args.model)
    steps = args.steps if args.steps else model.schedule_steps
    sched = make_schedule(steps)
    token_values = None
    if args.token:
        token_set, _ = read_store(args.token)
        token_values = token_set.members[0].values

    if args.encoder:
        if token_values is None:
            raise SystemExit("guided generation needs --token (encoder-space target)")
        encoder = load_encoder(args.encoder)
        target = NoisyCentroid(
            values=token_values, calibration=None, subsample=None, seed=args.seed
        )
        cfg = GuidanceConfig(weight=args.guidance_weight, target=target)
        y = base_conditioning(args.prompt_id, model.cond_dim)

        def eps_fn(x_t, t):
            return guided_eps(model, encoder, cfg, x_t, y, t, sched)

        image = ddim_sample(model, y, sched, seed=args.seed, eps_fn=eps_fn)
    else:
        if token_values is None:
            y = base_conditioning(args.prompt_id, model.cond_dim)
        else:
            token = NoisyCentroid(
                values=token_values, calibration=None, subsample=None, seed=args.seed
            )
            y = adapt_conditioning(args.prompt_id, token, cond_dim=model.cond_dim)
        image = ddim_sample(model, y, sched, seed=args.seed)
    write_image(args.out, image)
    print(f"sample -> {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    manifest = run_sweep_from_config(
        args.config, args.out, jobs=args.jobs, master_seed=args.master_seed
    )
    print(f"sweep complete: {len(manifest['cells'])} cells -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpembed",
        description="Differentially private diffusion adaptation via noisy "
        "aggregated embeddings",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="calibrate Gaussian noise for a budget")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sensitivity", type=float, default=2.0)
    p.add_argument("--population", type=int, required=True)
    p.add_argument("--sample", type=int, default=None)
    p.add_argument("--method", choices=("classical", "numeric"), default="numeric")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("aggregate", help="release a noisy centroid from a store")
    p.add_argument("--input", required=True)
    p.add_argument("--epsilon", type=float, default=None,
                   help="omit for a noise-free release")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--sample", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=("classical", "numeric"), default="numeric")
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("train-base", help="train the base denoiser")
    p.add_argument(
        "--dataset",
        action="append",
        required=True,
        type=lambda s: _parse_dataset_spec(s, with_prompt=True),
        help="family:n:seed[:prompt_id]; repeatable",
    )
    p.add_argument("--steps", type=int, default=TrainConfig.steps)
    p.add_argument("--batch", type=int, default=TrainConfig.batch)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--schedule-steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_base)

    p = sub.add_parser("embed-ti", help="train per-image token embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", type=_parse_dataset_spec, required=True)
    p.add_argument("--prompt-id", type=int, default=0)
    p.add_argument("--steps", type=int, default=TokenTrainConfig.steps)
    p.add_argument("--batch", type=int, default=TokenTrainConfig.batch)
    p.add_argument("--population", type=int, default=TokenTrainConfig.population)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed_ti)

    p = sub.add_parser("embed-encoder", help="fit the encoder and embed a dataset")
    p.add_argument(
        "--pool",
        action="append",
        required=True,
        type=_parse_dataset_spec,
        help="family:n:seed; repeatable",
    )
    p.add_argument("--dataset", type=_parse_dataset_spec, required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--save-encoder", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed_encoder)

    p = sub.add_parser("generate", help="sample an image from the model")
    p.add_argument("--model", required=True)
    p.add_argument("--token", default=None, help="embedding store; member 0 is used")
    p.add_argument("--prompt-id", type=int, default=0)
    p.add_argument("--guidance-weight", type=float, default=1.0)
    p.add_argument("--encoder", default=None,
                   help="encoder .npz; presence switches to guided sampling")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("sweep", help="run an (m, epsilon) sweep from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--master-seed", type=int, default=0)
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
