"""Real-image editing: DDIM inversion plus per-timestep null-parameter optimization.

The inversion runs at CfG scale 1 and records a pivot trajectory. Afterwards,
for each denoising step (walked from the terminal latent back to the image),
the zero-strength adapter embedding is optimized so that a full-guidance step
lands on the pivot; the optimized tokens act as the reconstruction pivot that
editing re-injects. Model weights and the null prompt embedding never change.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import GuidanceConfig, compose_full, ddim_invert_step, ddim_step, inference_timesteps
from .image import ImageBuffer
from .model import ModelBundle, ModelError, StyleParams
from .sampling import (
    SampleCond,
    adapter_eps,
    base_guidance_parts,
    decode_latent,
    encode_image,
    guided_eps,
    sample,
)

INVERSION_VERSION = 1


class InversionError(RuntimeError):
    pass


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class InversionRecord:
    """Pivot trajectory plus per-step optimized null-parameter tokens."""

    source_hash: str
    prompt_id: int
    edge: torch.Tensor
    cfg: GuidanceConfig
    steps: int
    pivot: list[torch.Tensor]  # index 0 = clean latent, index steps = terminal
    null_tokens: list[torch.Tensor]  # one per denoise step, terminal-first
    objectives: list[tuple[float, float]]  # (initial, final) per denoise step
    bundle_fingerprint: str
    reconstruction: ImageBuffer | None = None
    recon_psnr: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def z_terminal(self) -> torch.Tensor:
        return self.pivot[-1]

    def validate(self) -> None:
        if len(self.pivot) != self.steps + 1:
            raise InversionError(f"pivot length {len(self.pivot)} != steps+1 {self.steps + 1}")
        if len(self.null_tokens) != self.steps:
            raise InversionError(f"{len(self.null_tokens)} null tokens for {self.steps} steps")


def invert(
    bundle: ModelBundle,
    image: ImageBuffer,
    prompt_id: int,
    edge: torch.Tensor,
    steps: int = 50,
) -> list[torch.Tensor]:
    """Pivot inversion at CfG scale 1 with both control branches in the loop.

    Returns latents for grid positions 0..steps (clean image first). The
    zero-strength adapter contributes an exactly-zero effect direction, so the
    composed prediction reduces to the prompt-conditioned branch.
    """
    bundle.eval()
    schedule = bundle.schedule()
    ts = inference_timesteps(schedule.T, steps)  # descending
    asc = ts[::-1]
    cfg_w1 = GuidanceConfig(w1=1.0, w2=0.0, act_t=0.0, w=1.0)
    cond = SampleCond(prompt_id, edge, StyleParams.zeros(bundle.attributes))

    z = encode_image(image)
    pivot = [z.clone()]
    dim = float(z.numel())
    with torch.no_grad():
        for i, t in enumerate(asc):
            t_prev = asc[i - 1] if i > 0 else -1
            eps = guided_eps(bundle, z, t, cond, cfg_w1, t_norm=1.0)
            if not torch.isfinite(eps).all():
                raise InversionError(f"non-finite prediction while inverting at t={t}")
            z = ddim_invert_step(z, eps, t_prev, t, schedule)
            pivot.append(z.clone())
    norm = float(z.norm())
    if norm > 10.0 * math.sqrt(dim):
        import warnings

        warnings.warn(f"inversion terminal norm {norm:.1f} exceeds 10*sqrt(dim); likely divergent")
    return pivot


def optimize_null_param(
    bundle: ModelBundle,
    pivot: list[torch.Tensor],
    prompt_id: int,
    edge: torch.Tensor,
    cfg: GuidanceConfig | None = None,
    iterations: int = 10,
    lr: float = 1e-2,
    source_hash: str = "",
) -> InversionRecord:
    """Optimize the zero-strength embedding tokens step by step (terminal first).

    Each step minimizes the gap between the pivot latent and a full-guidance
    DDIM step whose adapter zero-branch uses the free tokens; tokens and the
    running latent carry over to the next step. Only the embedding tokens get
    gradients; the text null and all model weights stay fixed. If the objective
    rises for 3*iterations consecutive evaluations the learning rate is halved
    once; a repeat aborts. The kept tokens are always the best seen, so the
    final objective never exceeds the initial one.
    """
    bundle.eval()
    cfg = cfg if cfg is not None else GuidanceConfig()
    schedule = bundle.schedule()
    steps = len(pivot) - 1
    ts = inference_timesteps(schedule.T, steps)  # descending
    cond = SampleCond(prompt_id, edge, StyleParams.zeros(bundle.attributes))

    fingerprint = bundle.fingerprint()
    zero_tokens = bundle.null_param_tokens(1).detach()
    carried = zero_tokens.clone()
    z_bar = pivot[-1].detach().clone()
    null_tokens: list[torch.Tensor] = []
    objectives: list[tuple[float, float]] = []
    rising = 0
    halved = False
    cur_lr = lr

    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        t_norm = i / steps
        target = pivot[steps - 1 - i]

        # Branches that do not depend on the free tokens are evaluated once.
        with torch.no_grad():
            eps_u, g_p = base_guidance_parts(bundle, z_bar, t, cond)
            eps_at_zero = adapter_eps(bundle, z_bar, t, cond, zero_tokens)

        def objective(tokens: torch.Tensor, grad: bool) -> tuple[torch.Tensor, torch.Tensor]:
            with torch.set_grad_enabled(grad):
                g_a = eps_at_zero - adapter_eps(bundle, z_bar, t, cond, tokens)
                eps = compose_full(eps_u, g_p, g_a, cfg, t_norm)
                z_next = ddim_step(z_bar, eps, t, t_prev, schedule)
                loss = torch.mean((target - z_next) ** 2)
            return loss, z_next

        gated = cfg.effect_scale(t_norm) == 0.0
        if gated or iterations == 0:
            with torch.no_grad():
                eps = guided_eps(
                    bundle, z_bar, t, cond, cfg, t_norm,
                    strength_tokens=zero_tokens, null_param_tokens=carried,
                )
                z_next = ddim_step(z_bar, eps, t, t_prev, schedule)
                loss0 = torch.mean((target - z_next) ** 2)
            best = carried.clone()
            initial = final = float(loss0)
        else:
            tokens = carried.clone().requires_grad_(True)
            opt = torch.optim.Adam([tokens], lr=cur_lr)
            with torch.no_grad():
                loss0, _ = objective(tokens, grad=False)
            initial = float(loss0)
            best_val, best, prev = initial, tokens.detach().clone(), initial
            for _ in range(iterations):
                opt.zero_grad()
                loss, _ = objective(tokens, grad=True)
                loss.backward()
                opt.step()
                val = loss.item()
                if val > prev:
                    rising += 1
                    if rising >= 3 * iterations:
                        if halved:
                            raise InversionError(
                                f"objective kept rising after halving the learning rate (t={t})"
                            )
                        halved = True
                        cur_lr /= 2.0
                        opt = torch.optim.Adam([tokens], lr=cur_lr)
                        rising = 0
                else:
                    rising = 0
                prev = val
                if val < best_val:
                    best_val, best = val, tokens.detach().clone()
            final_loss, z_next = objective(best, grad=False)
            final = float(final_loss)
        null_tokens.append(best.detach().clone())
        objectives.append((initial, final))
        carried = best.detach().clone()
        z_bar = z_next.detach()

    record = InversionRecord(
        source_hash=source_hash,
        prompt_id=prompt_id,
        edge=edge.detach().clone(),
        cfg=cfg,
        steps=steps,
        pivot=[p.detach().clone() for p in pivot],
        null_tokens=null_tokens,
        objectives=objectives,
        bundle_fingerprint=fingerprint,
        meta={"iterations": iterations, "lr": lr},
    )
    record.validate()
    recon = edit_inverted(bundle, record, StyleParams.zeros(bundle.attributes))
    record.reconstruction = recon
    source = decode_latent(pivot[0])
    record.recon_psnr = psnr(recon, source)
    return record


def edit_inverted(
    bundle: ModelBundle,
    record: InversionRecord,
    style: StyleParams,
    cfg: GuidanceConfig | None = None,
) -> ImageBuffer:
    """Replay from the stored terminal latent, injecting the optimized tokens
    as the adapter zero-branch; zero strengths reproduce the reconstruction."""
    record.validate()
    actual = bundle.fingerprint()
    if actual != record.bundle_fingerprint:
        raise ModelError(
            f"bundle fingerprint mismatch: record belongs to {record.bundle_fingerprint[:12]}.., "
            f"got {actual[:12]}.."
        )
    cond = SampleCond(record.prompt_id, record.edge, style)
    result = sample(
        bundle,
        cond,
        cfg if cfg is not None else record.cfg,
        steps=record.steps,
        z_init=record.z_terminal,
        null_param_tokens_per_step=record.null_tokens,
    )
    return result.image


def invert_image(
    bundle: ModelBundle,
    image: ImageBuffer,
    prompt_id: int,
    edge: torch.Tensor,
    steps: int = 50,
    iterations: int = 10,
    lr: float = 1e-2,
    cfg: GuidanceConfig | None = None,
) -> InversionRecord:
    """Full pipeline: pivot inversion then null-parameter optimization."""
    pivot = invert(bundle, image, prompt_id, edge, steps)
    return optimize_null_param(
        bundle, pivot, prompt_id, edge, cfg=cfg, iterations=iterations, lr=lr,
        source_hash=image.content_hash(),
    )


# -- persistence ----------------------------------------------------------------


def save_inversion(record: InversionRecord, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": INVERSION_VERSION,
        "kind": "styledial-inversion",
        "source_hash": record.source_hash,
        "prompt_id": record.prompt_id,
        "edge": record.edge,
        "cfg": {"w1": record.cfg.w1, "w2": record.cfg.w2, "act_t": record.cfg.act_t, "w": record.cfg.w},
        "steps": record.steps,
        "pivot": record.pivot,
        "null_tokens": record.null_tokens,
        "objectives": record.objectives,
        "bundle_fingerprint": record.bundle_fingerprint,
        "reconstruction": None if record.reconstruction is None else record.reconstruction.data,
        "recon_psnr": record.recon_psnr,
        "meta": record.meta,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_inversion(path: str | Path) -> InversionRecord:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("kind") != "styledial-inversion":
        raise InversionError(f"{path} is not an inversion record")
    if payload.get("version") != INVERSION_VERSION:
        raise InversionError(f"unsupported inversion version {payload.get('version')}")
    record = InversionRecord(
        source_hash=payload["source_hash"],
        prompt_id=payload["prompt_id"],
        edge=payload["edge"],
        cfg=GuidanceConfig(**payload["cfg"]),
        steps=payload["steps"],
        pivot=payload["pivot"],
        null_tokens=payload["null_tokens"],
        objectives=[tuple(o) for o in payload["objectives"]],
        bundle_fingerprint=payload["bundle_fingerprint"],
        reconstruction=None if payload["reconstruction"] is None else ImageBuffer(payload["reconstruction"]),
        recon_psnr=payload["recon_psnr"],
        meta=payload.get("meta", {}),
    )
    record.validate()
    return record
