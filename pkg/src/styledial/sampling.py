"""Guided DDIM sampling: base denoiser + control branch + adapter effect guidance."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .diffusion import (
    GuidanceConfig,
    compose_cfg,
    compose_full,
    ddim_step,
    effect_guidance,
    inference_timesteps,
)
from .image import ImageBuffer
from .model import PROMPT_NULL_ID, ModelBundle, StyleParams


class SamplingError(RuntimeError):
    pass


def encode_image(img: ImageBuffer) -> torch.Tensor:
    """[0,1] image -> (1, C, H, W) latent in [-1, 1]."""
    arr = np.transpose(img.data, (2, 0, 1)).astype(np.float32)
    return torch.from_numpy(2.0 * arr - 1.0)[None]


def decode_latent(z: torch.Tensor) -> ImageBuffer:
    """(C, H, W) or (1, C, H, W) latent -> clamped [0,1] image."""
    if z.ndim == 4:
        z = z[0]
    arr = ((z.detach().cpu().numpy() + 1.0) / 2.0).clip(0.0, 1.0)
    return ImageBuffer(np.transpose(arr, (1, 2, 0)))


def edge_tensor(edge: ImageBuffer) -> torch.Tensor:
    """Edge map image -> (1, 1, H, W) conditioning tensor."""
    if edge.channels != 1:
        raise SamplingError("edge maps must be single-channel")
    return torch.from_numpy(edge.data[None, :, :, 0][None].astype(np.float32).copy())


@dataclass
class SampleCond:
    """Conditioning for one generation: prompt token, edge map, attribute strengths."""

    prompt_id: int
    edge: torch.Tensor
    style: StyleParams


def seeded_noise(shape: tuple[int, ...], seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return torch.randn(shape, generator=gen)


def base_guidance_parts(
    bundle: ModelBundle, z_t: torch.Tensor, t: int, cond: SampleCond
) -> tuple[torch.Tensor, torch.Tensor]:
    """Unconditional prediction and prompt-guidance direction.

    The control branch sees the prompt conditioning; the denoiser runs both
    null- and prompt-conditioned on the same control features.
    """
    b = z_t.shape[0]
    edge = cond.edge.expand(b, -1, -1, -1)
    cond_ids = torch.full((b,), cond.prompt_id, dtype=torch.long)
    null_ids = torch.full((b,), PROMPT_NULL_ID, dtype=torch.long)
    feats = bundle.control_features(edge, z_t, t, cond_ids)
    eps_u = bundle.denoise_base(z_t, t, null_ids, feats)
    eps_c = bundle.denoise_base(z_t, t, cond_ids, feats)
    return eps_u, eps_c - eps_u


def adapter_eps(bundle: ModelBundle, z_t: torch.Tensor, t: int, cond: SampleCond, tokens: torch.Tensor) -> torch.Tensor:
    """Adapter-steered prediction at the given strength tokens, prompt-free."""
    b = z_t.shape[0]
    edge = cond.edge.expand(b, -1, -1, -1)
    return bundle.adapter_forward(z_t, t, edge, tokens)


def guided_eps(
    bundle: ModelBundle,
    z_t: torch.Tensor,
    t: int,
    cond: SampleCond,
    cfg: GuidanceConfig,
    t_norm: float,
    *,
    strength_tokens: torch.Tensor | None = None,
    null_param_tokens: torch.Tensor | None = None,
) -> torch.Tensor:
    """One composed noise prediction.

    Effect guidance runs only when the activation gate is open; identical token
    inputs short-circuit to an exactly-zero effect direction with a single
    adapter evaluation. `strength_tokens` / `null_param_tokens` override the two
    adapter embeddings (used when replaying inversions with optimized
    null-parameter tokens).
    """
    b = z_t.shape[0]
    eps_u, g_p = base_guidance_parts(bundle, z_t, t, cond)
    g_a = None
    if cfg.effect_scale(t_norm) != 0.0:
        tok_k = strength_tokens if strength_tokens is not None else bundle.embed_lambda(cond.style, b)
        tok_0 = null_param_tokens if null_param_tokens is not None else bundle.null_param_tokens(b)
        if torch.equal(tok_k, tok_0):
            eps_shared = adapter_eps(bundle, z_t, t, cond, tok_k)
            g_a = effect_guidance(eps_shared, eps_shared)
        else:
            eps_k = adapter_eps(bundle, z_t, t, cond, tok_k)
            eps_0 = adapter_eps(bundle, z_t, t, cond, tok_0)
            g_a = effect_guidance(eps_k, eps_0)
    return compose_full(eps_u, g_p, g_a, cfg, t_norm)


@dataclass
class SampleResult:
    images: list[ImageBuffer]
    latents: torch.Tensor
    trajectory: list[torch.Tensor] | None
    timesteps: list[int]

    @property
    def image(self) -> ImageBuffer:
        return self.images[0]


def sample(
    bundle: ModelBundle,
    cond: SampleCond,
    cfg: GuidanceConfig,
    steps: int = 50,
    seed: int | None = 0,
    *,
    seeds: list[int] | None = None,
    z_init: torch.Tensor | None = None,
    null_param_tokens_per_step: list[torch.Tensor] | None = None,
    collect_trajectory: bool = False,
) -> SampleResult:
    """Deterministic guided DDIM sampling from Gaussian noise (or a given z_T).

    A list of seeds runs as one batch, ordered like the list. Re-running the
    same seed list is bitwise reproducible; batched and one-at-a-time runs
    agree to float tolerance (CPU kernels pick batch-dependent accumulation
    orders). Per-step null-parameter token overrides replace the adapter's
    zero-strength embedding (inversion replay/editing).
    """
    bundle.eval()
    schedule = bundle.schedule()
    ts = inference_timesteps(schedule.T, steps)
    size = bundle.cfg.image_size
    shape = (bundle.cfg.in_channels, size, size)

    if z_init is not None:
        z = z_init.detach().clone()
        if z.ndim == 3:
            z = z[None]
    else:
        seed_list = seeds if seeds is not None else [seed if seed is not None else 0]
        z = torch.cat([seeded_noise((1, *shape), s) for s in seed_list], dim=0)

    if null_param_tokens_per_step is not None and len(null_param_tokens_per_step) != steps:
        raise SamplingError(
            f"expected {steps} per-step null-parameter tokens, got {len(null_param_tokens_per_step)}"
        )

    trajectory = [z.clone()] if collect_trajectory else None
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else -1
            t_norm = i / steps
            override = None
            if null_param_tokens_per_step is not None:
                override = null_param_tokens_per_step[i].expand(z.shape[0], -1, -1)
            eps = guided_eps(bundle, z, t, cond, cfg, t_norm, null_param_tokens=override)
            if not torch.isfinite(eps).all():
                raise SamplingError(f"non-finite prediction at step {i} (t={t})")
            z = ddim_step(z, eps, t, t_prev, schedule)
            if not torch.isfinite(z).all():
                raise SamplingError(f"non-finite latent at step {i} (t={t_prev})")
            if collect_trajectory:
                trajectory.append(z.clone())
    images = [decode_latent(z[j]) for j in range(z.shape[0])]
    return SampleResult(images=images, latents=z, trajectory=trajectory, timesteps=ts)


def base_sample(
    bundle: ModelBundle,
    prompt_id: int,
    edge: torch.Tensor,
    cfg: GuidanceConfig,
    steps: int = 50,
    seed: int | None = 0,
    *,
    seeds: list[int] | None = None,
    z_init: torch.Tensor | None = None,
    collect_trajectory: bool = False,
) -> SampleResult:
    """Plain guided sampling without effect guidance (CfG at scale cfg.w)."""
    plain = GuidanceConfig(w1=cfg.w, w2=0.0, act_t=cfg.act_t, w=cfg.w)
    cond = SampleCond(prompt_id, edge, StyleParams.zeros(bundle.attributes))
    return sample(
        bundle, cond, plain, steps, seed, seeds=seeds, z_init=z_init, collect_trajectory=collect_trajectory
    )


# -- trajectory dump -----------------------------------------------------------


def save_trajectory(path: str | Path, result: SampleResult, seed: int, T: int) -> None:
    """Binary latent dump: one JSON header line, then raw float32 frames."""
    if result.trajectory is None:
        raise SamplingError("sample() was run without collect_trajectory")
    frames = torch.stack(result.trajectory).to(torch.float32)
    header = {
        "T": T,
        "steps": len(result.timesteps),
        "shape": list(frames.shape),
        "seed": seed,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(frames.numpy().tobytes())


def load_trajectory(path: str | Path) -> tuple[dict, torch.Tensor]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        data = np.frombuffer(fh.read(), dtype=np.float32).reshape(header["shape"])
    return header, torch.from_numpy(data.copy())
