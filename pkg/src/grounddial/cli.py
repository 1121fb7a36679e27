"""Command-line surface: synthetic data generation, training, evaluation,
ablations, and attention export.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
A JSON config file (--config) mirrors every flag; explicit flags override
the file. All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    GenerationError,
    FeatureFileError,
    MissingFeatureError,
    ParseError,
    SyntheticConfig,
    Vocabulary,
    dump_dataset_json,
    generate_synthetic_raw,
    load_dataset,
    write_features,
)
from .evaluation import ablate_distribution, evaluate, export_attention
from .model import init_model_params, named_parameters, prepare_units
from .training import DivergenceError, TrainConfig, load_checkpoint, restore_params, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

_LOSS_FLAG = {"gen": "generative", "disc": "discriminative", "multitask": "multitask"}
_POLICY_FLAG = {"post-train": "post_train_prior_eval", "always-prior": "always_prior"}


class DataError(RuntimeError):
    pass


def _write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                    artifacts: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "artifacts": sorted(artifacts),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def _merge_config_file(args: argparse.Namespace, parser_defaults: dict) -> argparse.Namespace:
    """Layer precedence: explicit flag > config file > parser default."""
    if not getattr(args, "config", None):
        for k, v in parser_defaults.items():
            if getattr(args, k, None) is None:
                setattr(args, k, v)
        return args
    try:
        file_cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read config file {args.config}: {e}") from e
    for k, default in parser_defaults.items():
        if getattr(args, k, None) is None:
            setattr(args, k, file_cfg.get(k, default))
    return args


# ---------------------------------------------------------------------------
# gen-synth

def _gen_synth_parser(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("gen-synth", help="write a synthetic dataset + feature file")
    p.add_argument("--images", type=int, default=500)
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--colors", type=int, default=6)
    p.add_argument("--shapes", type=int, default=6)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--candidates", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--dv", type=int, default=16)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    return p


def cmd_gen_synth(args) -> int:
    started = time.time()
    cfg = SyntheticConfig(
        num_images=args.images, mu=args.objects, num_colors=args.colors,
        num_shapes=args.shapes, rounds=args.rounds, candidates=args.candidates,
        noise=args.noise, d_v=args.dv, seed=args.seed,
    )
    raw, features = generate_synthetic_raw(cfg)
    raw["split"] = args.split
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "dataset.json").write_text(dump_dataset_json(raw))
    write_features(out_dir / "features.bin", features)
    _write_manifest(out_dir, "gen-synth", cfg.__dict__, args.seed,
                    ["dataset.json", "features.bin"], started)
    print(f"wrote {out_dir / 'dataset.json'} and {out_dir / 'features.bin'} "
          f"({cfg.num_images} images, {cfg.mu} objects each)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_TRAIN_DEFAULTS = {
    "loss": "gen", "kl_weight": 1.0, "bridge": "attn_kl", "detach_posterior": True,
    "axis_mode": "columns", "decoder_features": "post-train", "batch": 32,
    "epochs": 20, "lr": 1e-3, "decay_factor": 0.75, "warmup_epochs": 1,
    "decay_every": 2, "seed": 0, "d_q": 64, "d_e": 64, "heads": 4, "d_h": 64,
    "seq_len": 20, "max_history": 11, "score_norm": "mean",
}


def _train_parser(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("train", help="train on a dataset, checkpoint best-by-val-MRR")
    p.add_argument("--data", required=True, help="training dataset JSON")
    p.add_argument("--features", default=None, help="feature file (default: features.bin beside the data)")
    p.add_argument("--val-data", default=None, help="validation dataset JSON (default: reuse training data)")
    p.add_argument("--val-features", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file mirroring these flags")
    p.add_argument("--loss", choices=sorted(_LOSS_FLAG), default=None)
    p.add_argument("--kl-weight", dest="kl_weight", type=float, default=None)
    p.add_argument("--bridge", choices=["attn_kl", "attn_mse", "image_kl", "image_mse",
                                        "attn_kl_image_mse"], default=None)
    det = p.add_mutually_exclusive_group()
    det.add_argument("--detach-posterior", dest="detach_posterior", action="store_true", default=None)
    det.add_argument("--no-detach-posterior", dest="detach_posterior", action="store_false")
    p.add_argument("--axis-mode", dest="axis_mode", choices=["columns", "rows"], default=None)
    p.add_argument("--decoder-features", dest="decoder_features",
                   choices=sorted(_POLICY_FLAG), default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--decay-factor", dest="decay_factor", type=float, default=None)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=None)
    p.add_argument("--decay-every", dest="decay_every", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--d-q", dest="d_q", type=int, default=None)
    p.add_argument("--d-e", dest="d_e", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--d-h", dest="d_h", type=int, default=None)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=None)
    p.add_argument("--max-history", dest="max_history", type=int, default=None)
    p.add_argument("--score-norm", dest="score_norm", choices=["mean", "sum"], default=None)
    p.add_argument("--verbose", action="store_true")
    return p


def cmd_train(args) -> int:
    started = time.time()
    args = _merge_config_file(args, _TRAIN_DEFAULTS)
    cfg = TrainConfig(
        loss_mode=_LOSS_FLAG[args.loss],
        kl_weight=args.kl_weight,
        bridge_variant=args.bridge,
        detach_posterior=args.detach_posterior,
        decoder_feature_policy=_POLICY_FLAG[args.decoder_features],
        axis_mode=args.axis_mode,
        score_norm=args.score_norm,
        base_lr=args.lr,
        warmup_epochs=args.warmup_epochs,
        decay_every=args.decay_every,
        decay_factor=args.decay_factor,
        max_epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        d_q=args.d_q,
        d_e=args.d_e,
        n_heads=args.heads,
        d_h=args.d_h,
        seq_len=args.seq_len,
        max_history=args.max_history,
    )
    cfg.validate()
    ds_train = load_dataset(args.data, "train", args.features)
    if args.val_data:
        ds_val = load_dataset(args.val_data, "val", args.val_features, vocab=ds_train.vocab)
    else:
        ds_val = ds_train
    if any(ex.region_features is None for ex in ds_train.examples):
        raise DataError(f"no feature file found for {args.data}; pass --features")
    d_v = ds_train.examples[0].region_features.shape[1]
    params = init_model_params(np.random.default_rng(cfg.seed), len(ds_train.vocab),
                               d_v=d_v, d_e=cfg.d_e, d_q=cfg.d_q, n_heads=cfg.n_heads,
                               d_h=cfg.d_h, fusion_residual=cfg.fusion_residual)
    out_dir = Path(args.out)
    result = train(ds_train, ds_val, params, cfg, out_dir=out_dir, quiet=not args.verbose)
    _write_manifest(out_dir, "train", cfg.to_dict(), cfg.seed,
                    ["metrics.jsonl", "best.bin", "best.manifest.json",
                     "final.bin", "final.manifest.json"], started)
    print(f"trained {cfg.max_epochs} epochs; best val MRR {result.best_mrr:.4f} "
          f"at epoch {result.best_epoch}; artifacts in {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def _eval_parser(sub) -> argparse.ArgumentParser:
    p = sub.add_parser("eval", help="evaluate a checkpoint in the inference condition")
    p.add_argument("--ckpt", required=True, help="checkpoint base path (best / best.bin)")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None)
    p.add_argument("--split", default="val")
    p.add_argument("--decoder", choices=["gen", "disc"], default=None,
                   help="override the decoder implied by the training mode")
    p.add_argument("--ablate", choices=["mean", "random", "oracle"], default=None)
    p.add_argument("--export-attention", dest="export_attention", default=None,
                   help="write one JSON line per (image, round) to this path")
    p.add_argument("--with-answers", dest="with_answers", action="store_true",
                   help="include the answer-aware posterior in the attention export")
    p.add_argument("--report", default=None, help="write the EvalReport JSON here (default stdout)")
    p.add_argument("--seed", type=int, default=0)
    return p


def cmd_eval(args) -> int:
    base = Path(args.ckpt)
    if base.suffix == ".bin":
        base = base.with_suffix("")
    try:
        tensors, cfg, vocab_tokens = load_checkpoint(base)
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {e}") from e
    vocab = Vocabulary(vocab_tokens)
    ds = load_dataset(args.data, args.split, args.features, vocab=vocab)
    if any(ex.region_features is None for ex in ds.examples):
        raise DataError(f"no feature file found for {args.data}; pass --features")
    d_v = ds.examples[0].region_features.shape[1]
    params = init_model_params(np.random.default_rng(0), len(vocab), d_v=d_v,
                               d_e=cfg.d_e, d_q=cfg.d_q, n_heads=cfg.n_heads,
                               d_h=cfg.d_h, fusion_residual=cfg.fusion_residual)
    try:
        restore_params(params, tensors)
    except ValueError as e:
        raise DataError(f"manifest mismatch between checkpoint and model: {e}") from e

    decoder = {"gen": "generative", "disc": "discriminative"}.get(args.decoder) or (
        "discriminative" if cfg.loss_mode == "discriminative" else "generative")
    units = prepare_units(ds, cfg.seq_len, cfg.max_history)
    eval_kw = dict(decoder=decoder, seq_len=cfg.seq_len, max_history=cfg.max_history,
                   axis_mode=cfg.axis_mode, score_norm=cfg.score_norm, units=units)
    if args.ablate:
        report = ablate_distribution(params, ds, args.ablate, seed=args.seed, **eval_kw)
    else:
        report = evaluate(params, ds, **eval_kw)

    text = json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)

    if args.export_attention:
        records = export_attention(params, ds, seq_len=cfg.seq_len,
                                   max_history=cfg.max_history, axis_mode=cfg.axis_mode,
                                   with_posterior=args.with_answers, units=units)
        with open(args.export_attention, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grounddial",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    _gen_synth_parser(sub)
    _train_parser(sub)
    _eval_parser(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"gen-synth": cmd_gen_synth, "train": cmd_train, "eval": cmd_eval}
    try:
        return handlers[args.command](args)
    except (ParseError, MissingFeatureError, FeatureFileError, GenerationError,
            DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
