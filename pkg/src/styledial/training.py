"""Base denoiser/control pretraining and adapter fine-tuning with paired regularization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import load_dataset
from .diffusion import add_noise, ddim_step
from .model import PROMPT_NULL_ID, DenoiserConfig, ModelBundle, save_bundle


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    beta: float = 5.0  # paired-regularization strength
    act_free: bool = True  # reserved: the activation gate is inference-only
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    prompt_dropout: float = 0.1
    log_every: int = 200

    def __post_init__(self):
        if self.steps < 1:
            raise TrainingError("steps must be >= 1")
        if self.beta < 0:
            raise TrainingError("beta must be >= 0")


@dataclass
class PairedBatch:
    """Stylized/unstyled latent pair sharing content, edge map, noise, and timestep."""

    z0_k: torch.Tensor
    z0_zero: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    strengths: torch.Tensor
    edge: torch.Tensor
    prompt_ids: torch.Tensor

    def __post_init__(self):
        if not (self.z0_k.shape == self.z0_zero.shape == self.eps.shape):
            raise TrainingError("paired latents and noise must share one shape")


def _pair_predictions(pair: PairedBatch, bundle: ModelBundle) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Shared z_t plus adapter predictions at strength k and at zero."""
    schedule = bundle.schedule()
    z_t = add_noise(pair.z0_k, pair.eps, pair.t, schedule)
    tok_k = bundle.adapter.lam_embed(pair.strengths)
    tok_0 = bundle.adapter.lam_embed(torch.zeros_like(pair.strengths))
    eps_k = bundle.adapter_forward(z_t, pair.t, pair.edge, tok_k, pair.prompt_ids)
    eps_0 = bundle.adapter_forward(z_t, pair.t, pair.edge, tok_0, pair.prompt_ids)
    return z_t, eps_k, eps_0


def reg_loss(pair: PairedBatch, bundle: ModelBundle, predictions=None) -> torch.Tensor:
    """Paired regularization: squared one-step prediction gap, damped where the
    clean pair already differs.

    Both one-DDIM-step latents start from the shared noised stylized latent;
    the element-wise denominator is 1 + |z0_k - z0_zero|. Mean-over-elements
    norm convention.
    """
    schedule = bundle.schedule()
    z_t, eps_k, eps_0 = predictions if predictions is not None else _pair_predictions(pair, bundle)
    z_prev_k = ddim_step(z_t, eps_k, pair.t, pair.t - 1, schedule)
    z_prev_0 = ddim_step(z_t, eps_0, pair.t, pair.t - 1, schedule)
    denom = 1.0 + (pair.z0_k - pair.z0_zero).abs()
    return torch.mean(((z_prev_k - z_prev_0).abs() / denom) ** 2)


def adapter_loss(pair: PairedBatch, bundle: ModelBundle, beta: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Diffusion term on the strength-k branch plus beta * reg_loss."""
    predictions = _pair_predictions(pair, bundle)
    _, eps_k, _ = predictions
    diff = torch.mean((pair.eps - eps_k) ** 2)
    reg = reg_loss(pair, bundle, predictions=predictions)
    return diff + beta * reg, diff, reg


def _write_loss_csv(path: Path, rows: list[tuple]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "diffusion_loss", "reg_loss", "total"])
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.8f}" for v in row[1:]])


class _LossGuard:
    """Aborts on non-finite loss, pointing at the last good checkpoint."""

    def __init__(self, out_dir: Path | None):
        self.out_dir = out_dir
        self.last_good: Path | None = None

    def check(self, value: float, step: int) -> None:
        if math.isfinite(value):
            return
        hint = f"; last good checkpoint: {self.last_good}" if self.last_good else ""
        raise TrainingError(f"non-finite loss at step {step}{hint}")


def train_base(
    manifest: str | Path,
    config: TrainConfig,
    model_cfg: DenoiserConfig | None = None,
    out_dir: str | Path | None = None,
    schedule_spec: dict | None = None,
) -> tuple[ModelBundle, list[tuple]]:
    """Train denoiser + control branch on the unstyled renditions (noise MSE).

    The prompt drops to the null embedding with probability
    config.prompt_dropout so classifier-free guidance works at inference.
    Deterministic for a fixed (seed, config, dataset).
    """
    data = load_dataset(manifest)
    if len(data.zero_indices) == 0:
        raise TrainingError("manifest has no zero-strength records")
    out = Path(out_dir) if out_dir is not None else None
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xBA5E]))

    bundle = ModelBundle.create(
        model_cfg or DenoiserConfig(), data.attributes, seed=config.seed, schedule_spec=schedule_spec
    )
    schedule = bundle.schedule()
    params = {}
    params.update(bundle.trainable_parameters("base"))
    params.update(bundle.trainable_parameters("control"))
    # The adapter copy refreshes from the control branch after training.
    params = {n: p for n, p in params.items() if not n.startswith("adapter.")}
    opt = torch.optim.Adam(params.values(), lr=config.lr)
    guard = _LossGuard(out)

    rows: list[tuple] = []
    for step in range(config.steps):
        idx = rng.choice(data.zero_indices, size=config.batch_size, replace=True)
        z0, edge, prompt_ids, _ = data.batch(idx)
        drop = torch.from_numpy(rng.random(config.batch_size) < config.prompt_dropout)
        prompt_ids = torch.where(drop, torch.full_like(prompt_ids, PROMPT_NULL_ID), prompt_ids)
        t = torch.randint(0, schedule.T, (config.batch_size,))
        eps = torch.randn_like(z0)
        z_t = add_noise(z0, eps, t, schedule)

        feats = bundle.control_features(edge, z_t, t, prompt_ids)
        eps_hat = bundle.denoise_base(z_t, t, prompt_ids, feats)
        loss = torch.mean((eps - eps_hat) ** 2)
        guard.check(loss.item(), step)
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % config.log_every == 0 or step == config.steps - 1:
            rows.append((step, loss.item(), 0.0, loss.item()))
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            bundle.sync_adapter()
            ckpt = out / f"base_step{step + 1:06d}.pt"
            save_bundle(bundle, ckpt, meta={"phase": "base", "step": step + 1})
            guard.last_good = ckpt

    bundle.sync_adapter()
    bundle.meta.update({"phase": "base", "train_steps": config.steps, "train_seed": config.seed})
    if out is not None:
        save_bundle(bundle, out / "base.pt", meta={"phase": "base"})
        _write_loss_csv(out / "base_loss.csv", rows)
    return bundle, rows


def _freeze_non_adapter(bundle: ModelBundle):
    frozen = []
    for name, p in bundle.named_parameters().items():
        if bundle.parameter_phase(name) != "adapter" and p.requires_grad:
            p.requires_grad_(False)
            frozen.append(p)
    return frozen


def train_adapter(
    manifest: str | Path,
    bundle: ModelBundle,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> tuple[ModelBundle, list[tuple]]:
    """Fine-tune only the extra attention layers and the strength embedder.

    Each step draws stylized records plus their zero-strength siblings with a
    shared noise/timestep, applies the diffusion term on the stylized branch,
    and adds beta * reg_loss. The frozen-weight fingerprint is re-checked at
    every checkpoint and at the end; any drift aborts the run.
    """
    data = load_dataset(manifest)
    if tuple(data.attributes) != bundle.attributes:
        raise TrainingError(f"dataset attributes {data.attributes} != bundle {bundle.attributes}")
    if len(data.variant_indices) == 0:
        raise TrainingError("manifest has no stylized variants to pair")
    out = Path(out_dir) if out_dir is not None else None
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xADA7]))

    bundle.sync_adapter()
    fingerprint = bundle.fingerprint()
    frozen = _freeze_non_adapter(bundle)
    try:
        params = bundle.trainable_parameters("adapter")
        opt = torch.optim.Adam(params.values(), lr=config.lr)
        guard = _LossGuard(out)

        schedule = bundle.schedule()
        rows: list[tuple] = []
        for step in range(config.steps):
            idx = rng.choice(data.variant_indices, size=config.batch_size, replace=True)
            z0_k, z0_zero, strengths, edge, prompt_ids = data.paired_arrays(idx)
            t = torch.randint(0, schedule.T, (config.batch_size,))
            eps = torch.randn_like(z0_k)
            pair = PairedBatch(z0_k, z0_zero, eps, t, strengths, edge, prompt_ids)
            total, diff, reg = adapter_loss(pair, bundle, config.beta)
            guard.check(total.item(), step)
            opt.zero_grad()
            total.backward()
            opt.step()

            if step % config.log_every == 0 or step == config.steps - 1:
                rows.append((step, diff.item(), reg.item(), total.item()))
            if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                if bundle.fingerprint() != fingerprint:
                    raise TrainingError("frozen-weight mutation detected during adapter training")
                ckpt = out / f"adapter_step{step + 1:06d}.pt"
                save_bundle(bundle, ckpt, meta={"phase": "adapter", "step": step + 1, "beta": config.beta})
                guard.last_good = ckpt
    finally:
        for p in frozen:
            p.requires_grad_(True)

    if bundle.fingerprint() != fingerprint:
        raise TrainingError("frozen-weight mutation detected after adapter training")
    bundle.meta.update({
        "phase": "adapter",
        "adapter_steps": config.steps,
        "adapter_seed": config.seed,
        "beta": config.beta,
    })
    if out is not None:
        save_bundle(bundle, out / "adapter.pt", meta={"phase": "adapter", "beta": config.beta})
        _write_loss_csv(out / "adapter_loss.csv", rows)
    return bundle, rows
