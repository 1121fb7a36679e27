"""Optimizer, learning-rate schedule, loss composition, and the training
loop with its train/inference feature switch.

During training the decoder consumes the posterior visual feature; per-epoch
validation runs strictly in the inference condition (prior only, never the
posterior branch) and the best checkpoint is selected by validation MRR.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import grounding
from .autodiff import ContractError, Tape, Tensor, backward, read_tensor, write_tensor
from .data import DialogDataset, batch_iterator
from .evaluation import EvalReport, evaluate
from .model import ModelParams, forward_unit, init_model_params, named_parameters, prepare_units, zero_grads

LOSS_MODES = ("generative", "discriminative", "multitask")
FEATURE_POLICIES = ("post_train_prior_eval", "always_prior")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    loss_mode: str = "generative"
    kl_weight: float = 1.0
    bridge_variant: str = "attn_kl"
    detach_posterior: bool = True
    decoder_feature_policy: str = "post_train_prior_eval"
    axis_mode: str = "columns"
    score_norm: str = "mean"
    fusion_residual: bool = True
    share_cross_attention: bool = False
    cross_residual: bool = True
    posterior_values: str = "context"
    base_lr: float = 1e-3
    warmup_epochs: int = 1
    decay_every: int = 2
    decay_factor: float = 0.75
    max_epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    d_q: int = 64
    d_e: int = 64
    n_heads: int = 4
    d_h: int = 64
    seq_len: int = 20
    max_history: int = 11

    def validate(self) -> None:
        if self.loss_mode not in LOSS_MODES:
            raise ContractError(f"loss_mode must be one of {LOSS_MODES}")
        if self.decoder_feature_policy not in FEATURE_POLICIES:
            raise ContractError(f"decoder_feature_policy must be one of {FEATURE_POLICIES}")
        if self.kl_weight < 0:
            raise ContractError("kl_weight must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ContractError("decay_factor must lie in (0, 1]")
        if self.max_epochs < 1:
            raise ContractError("max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def compose_loss(L_G: Optional[Tensor], L_D: Optional[Tensor], L_KL: Tensor,
                 cfg: TrainConfig) -> Tensor:
    """Mode-selected sum of decoder losses plus kl_weight times the bridge."""
    bridge = ad.scale(L_KL, cfg.kl_weight)
    if cfg.loss_mode == "generative":
        if L_G is None:
            raise ContractError("generative mode needs L_G")
        return ad.add(L_G, bridge)
    if cfg.loss_mode == "discriminative":
        if L_D is None:
            raise ContractError("discriminative mode needs L_D")
        return ad.add(L_D, bridge)
    if cfg.loss_mode == "multitask":
        if L_G is None or L_D is None:
            raise ContractError("multitask mode needs both L_G and L_D")
        return ad.add(ad.add(L_G, L_D), bridge)
    raise ContractError(f"unknown loss_mode {cfg.loss_mode!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from base_lr/10, then stepwise decay.

    During warmup_epochs the rate ramps from base_lr/10 toward base_lr;
    afterwards lr = base_lr * decay_factor ** floor((epoch - warmup) / decay_every).
    """
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    lo = cfg.base_lr / 10.0
    if epoch < cfg.warmup_epochs:
        return lo + (cfg.base_lr - lo) * (epoch / cfg.warmup_epochs)
    steps = (epoch - cfg.warmup_epochs) // cfg.decay_every
    return cfg.base_lr * cfg.decay_factor ** steps


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(named: dict[str, Tensor], state: OptimizerState, lr: float,
              cfg: TrainConfig) -> None:
    """Bias-corrected Adam; parameters without a gradient are left alone."""
    state.step += 1
    t = state.step
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    for name, p in named.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoints: tensor blobs in manifest order plus a JSON manifest

def save_checkpoint(base: Path, named: dict[str, Tensor], cfg: TrainConfig,
                    vocab_tokens: list[str], extra: Optional[dict] = None) -> None:
    base = Path(base)
    names = list(named)
    with open(base.with_suffix(".bin"), "wb") as fh:
        for name in names:
            write_tensor(fh, named[name])
    manifest = {
        "tensors": [{"name": n, "shape": list(named[n].shape)} for n in names],
        "config": cfg.to_dict(),
        "vocab": vocab_tokens,
    }
    if extra:
        manifest.update(extra)
    base.with_suffix(".manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_checkpoint(base: Path) -> tuple[dict[str, np.ndarray], TrainConfig, list[str]]:
    base = Path(base)
    manifest = json.loads(base.with_suffix(".manifest.json").read_text())
    cfg = TrainConfig.from_dict(manifest["config"])
    tensors: dict[str, np.ndarray] = {}
    with open(base.with_suffix(".bin"), "rb") as fh:
        for entry in manifest["tensors"]:
            t = read_tensor(fh)
            if list(t.shape) != entry["shape"]:
                raise ValueError(
                    f"manifest mismatch for {entry['name']!r}: "
                    f"file has {t.shape}, manifest says {entry['shape']}")
            tensors[entry["name"]] = t.data
    return tensors, cfg, manifest["vocab"]


def restore_params(params: ModelParams, tensors: dict[str, np.ndarray]) -> None:
    named = named_parameters(params)
    if set(named) != set(tensors):
        missing = set(named) ^ set(tensors)
        raise ValueError(f"manifest mismatch: parameter set differs on {sorted(missing)}")
    for name, arr in tensors.items():
        if named[name].shape != arr.shape:
            raise ValueError(f"manifest mismatch for {name!r}: {named[name].shape} vs {arr.shape}")
        named[name].data = arr.copy()


def _snapshot(named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in named.items()}


@dataclass
class TrainResult:
    epochs: list[dict]
    best_epoch: int
    best_mrr: float
    best_params: dict[str, np.ndarray]
    final_params: dict[str, np.ndarray]


def train(ds_train: DialogDataset, ds_val: DialogDataset, params: ModelParams,
          cfg: TrainConfig, out_dir: Optional[Path] = None,
          quiet: bool = True) -> TrainResult:
    """Run the full loop; returns per-epoch logs and best/final snapshots.

    With out_dir set, writes metrics.jsonl plus best/final checkpoints as it
    goes, so the best checkpoint survives a later divergence abort.
    """
    cfg.validate()
    named = named_parameters(params)
    state = OptimizerState()
    train_units = prepare_units(ds_train, cfg.seq_len, cfg.max_history)
    val_units = prepare_units(ds_val, cfg.seq_len, cfg.max_history)
    eval_decoder = "discriminative" if cfg.loss_mode == "discriminative" else "generative"

    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.jsonl"
        log_path.write_text("")

    epochs: list[dict] = []
    best_epoch, best_mrr = -1, -1.0
    best_params = _snapshot(named)
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        sums = {"L_G": 0.0, "L_D": 0.0, "L_KL": 0.0}
        n_seen = 0
        epoch_seed = cfg.seed * 1_000_003 + epoch
        order = np.random.default_rng(epoch_seed).permutation(len(train_units))
        for start in range(0, len(train_units), cfg.batch_size):
            batch = [train_units[int(i)] for i in order[start:start + cfg.batch_size]]
            zero_grads(params)
            with Tape() as tape:
                parts_g, parts_d, parts_kl = [], [], []
                for unit in batch:
                    fw = forward_unit(
                        params, unit,
                        loss_mode=cfg.loss_mode,
                        bridge_variant=cfg.bridge_variant,
                        kl_weight=cfg.kl_weight,
                        detach_posterior=cfg.detach_posterior,
                        axis_mode=cfg.axis_mode,
                        decoder_feature_policy=cfg.decoder_feature_policy,
                        share_cross_attention=cfg.share_cross_attention,
                        cross_residual=cfg.cross_residual,
                        posterior_values=cfg.posterior_values,
                    )
                    if fw.L_G is not None:
                        parts_g.append(fw.L_G)
                    if fw.L_D is not None:
                        parts_d.append(fw.L_D)
                    parts_kl.append(fw.L_KL)
                L_G = ad.mean_of(parts_g) if parts_g else None
                L_D = ad.mean_of(parts_d) if parts_d else None
                L_KL = ad.mean_of(parts_kl)
                loss = compose_loss(L_G, L_D, L_KL, cfg)
            if not np.isfinite(loss.data).all():
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}; best checkpoint retained")
            backward(loss, tape)
            adam_step(named, state, lr, cfg)
            b = len(batch)
            n_seen += b
            if L_G is not None:
                sums["L_G"] += L_G.item() * b
            if L_D is not None:
                sums["L_D"] += L_D.item() * b
            sums["L_KL"] += L_KL.item() * b

        # inference-condition validation: the posterior branch must stay cold
        posterior_before = grounding.posterior_call_count()
        report = evaluate(params, ds_val, decoder=eval_decoder, seq_len=cfg.seq_len,
                          max_history=cfg.max_history, axis_mode=cfg.axis_mode,
                          score_norm=cfg.score_norm, cross_residual=cfg.cross_residual,
                          units=val_units)
        if grounding.posterior_call_count() != posterior_before:
            raise ContractError("validation touched the posterior branch")

        entry: dict = {"epoch": epoch, "lr": lr, "L_KL": sums["L_KL"] / n_seen,
                       "val": report.to_dict()}
        if cfg.loss_mode in ("generative", "multitask"):
            entry["L_G"] = sums["L_G"] / n_seen
        if cfg.loss_mode in ("discriminative", "multitask"):
            entry["L_D"] = sums["L_D"] / n_seen
        epochs.append(entry)
        if not quiet:
            print(json.dumps(entry, sort_keys=True))
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

        if report.mrr > best_mrr:
            best_mrr = report.mrr
            best_epoch = epoch
            best_params = _snapshot(named)
            if out_dir is not None:
                save_checkpoint(out_dir / "best", named, cfg, ds_train.vocab.id_to_token,
                                {"epoch": epoch})

    final_params = _snapshot(named)
    if out_dir is not None:
        save_checkpoint(out_dir / "final", named, cfg, ds_train.vocab.id_to_token,
                        {"epoch": cfg.max_epochs - 1})
    return TrainResult(epochs=epochs, best_epoch=best_epoch, best_mrr=best_mrr,
                       best_params=best_params, final_params=final_params)
