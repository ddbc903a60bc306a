"""Toy pixel-space denoiser, edge-conditioned control branch, and style adapter.

The denoiser is a small U-Net with self/prompt-attention at the coarse
resolutions. The control branch is a trainable copy of its encoder whose
outputs enter the decoder through zero-initialized projections, so a fresh
branch leaves the denoiser untouched. The adapter is a second control branch
whose downsampling attention blocks carry an extra cross-attention over
strength-embedding tokens; only those extra layers and the embedder train.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, make_schedule

# Names that mark adapter-phase (trainable) parameters inside the adapter branch.
_ADAPTER_TRAINABLE_MARKS = ("extra_attn", "extra_norm", "lam_embed")

PROMPT_NULL_ID = -1


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 3
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 1, 1)
    num_res_blocks: int = 1
    attention_resolutions: tuple[int, ...] = (16, 8)
    prompt_vocab_size: int = 16
    prompt_embed_dim: int = 64
    time_embed_dim: int = 256
    lambda_embed_dim: int = 64
    norm_groups: int = 8

    def __post_init__(self):
        for name in ("image_size", "in_channels", "base_channels", "num_res_blocks",
                     "prompt_vocab_size", "prompt_embed_dim", "time_embed_dim",
                     "lambda_embed_dim", "norm_groups"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        res = self.image_size
        valid = {res // (2 ** i) for i in range(len(self.channel_mults))}
        if not set(self.attention_resolutions) <= valid:
            raise ModelError(
                f"attention resolutions {self.attention_resolutions} not all reachable from {sorted(valid)}"
            )


@dataclass(frozen=True)
class StyleParams:
    """Ordered per-attribute strengths; training range [0, 1], sliders go to 2."""

    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise ModelError("names/values length mismatch")
        if any(not math.isfinite(v) for v in self.values):
            raise ModelError("strengths must be finite")

    @classmethod
    def zeros(cls, names: Sequence[str]) -> "StyleParams":
        return cls(tuple(names), tuple(0.0 for _ in names))

    @classmethod
    def from_mapping(cls, names: Sequence[str], mapping: Mapping[str, float]) -> "StyleParams":
        unknown = set(mapping) - set(names)
        if unknown:
            raise ModelError(f"unknown attributes {sorted(unknown)}; model has {list(names)}")
        return cls(tuple(names), tuple(float(mapping.get(n, 0.0)) for n in names))

    def tensor(self, batch: int = 1) -> torch.Tensor:
        return torch.tensor(self.values, dtype=torch.float32).repeat(batch, 1)

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.values)


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class TimestepEmbedding(nn.Module):
    def __init__(self, channels: int, out_dim: int):
        super().__init__()
        self.channels = channels
        self.mlp = nn.Sequential(nn.Linear(channels, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.channels // 2
        dtype = self.mlp[0].weight.dtype
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
        args = t.to(dtype)[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
        return self.mlp(emb)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SingleHeadAttention(nn.Module):
    def __init__(self, channels: int, context_dim: int | None = None, zero_out: bool = False):
        super().__init__()
        context_dim = context_dim if context_dim is not None else channels
        self.scale = channels ** -0.5
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        if zero_out:
            zero_module(self.to_out)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q, k, v = self.to_q(x), self.to_k(context), self.to_v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        return self.to_out(attn @ v)


class AttentionBlock(nn.Module):
    """Self-attention, prompt cross-attention, optional strength extra-attention, MLP.

    The extra attention (adapter branch only) sits directly after the prompt
    cross-attention; its output projection starts at zero so a fresh block is
    an exact no-op for every strength input.
    """

    def __init__(self, channels: int, prompt_dim: int, lambda_dim: int | None = None):
        super().__init__()
        self.norm_self = nn.LayerNorm(channels)
        self.self_attn = SingleHeadAttention(channels)
        self.norm_cross = nn.LayerNorm(channels)
        self.cross_attn = SingleHeadAttention(channels, prompt_dim)
        self.has_extra = lambda_dim is not None
        if self.has_extra:
            self.extra_norm = nn.LayerNorm(channels)
            self.extra_attn = SingleHeadAttention(channels, lambda_dim, zero_out=True)
        self.norm_ff = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 2 * channels), nn.SiLU(), nn.Linear(2 * channels, channels))

    def forward(
        self,
        x: torch.Tensor,
        prompt_tokens: torch.Tensor,
        lam_tokens: torch.Tensor | None = None,
    ) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(1, 2)
        tokens = tokens + self.self_attn(self.norm_self(tokens), self.norm_self(tokens))
        tokens = tokens + self.cross_attn(self.norm_cross(tokens), prompt_tokens)
        if self.has_extra:
            if lam_tokens is None:
                raise ModelError("adapter attention block requires strength tokens")
            tokens = tokens + self.extra_attn(self.extra_norm(tokens), lam_tokens)
        tokens = tokens + self.ff(self.norm_ff(tokens))
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class LambdaEmbedder(nn.Module):
    """Strength vector -> token sequence: one bias token plus one token per attribute.

    Each attribute token is a learned linear map of its scalar strength plus a
    learned attribute-identity vector, so the embedding is Lipschitz in the
    strengths and attributes stay distinguishable at equal values.
    """

    def __init__(self, attribute_names: Sequence[str], dim: int):
        super().__init__()
        self.attribute_names = tuple(attribute_names)
        n = len(self.attribute_names)
        if n == 0:
            raise ModelError("at least one attribute required")
        self.scale = nn.Parameter(torch.randn(n, dim) * 0.02)
        self.ident = nn.Parameter(torch.randn(n, dim) * 0.02)
        self.bias_token = nn.Parameter(torch.randn(dim) * 0.02)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        if values.ndim != 2 or values.shape[1] != len(self.attribute_names):
            raise ModelError(f"expected (B, {len(self.attribute_names)}) strengths, got {tuple(values.shape)}")
        attr = values[:, :, None] * self.scale[None] + self.ident[None]
        bias = self.bias_token[None, None, :].expand(values.shape[0], 1, -1)
        return torch.cat([bias, attr], dim=1)


class PromptConditioner(nn.Module):
    """Embedding table over the prompt vocabulary plus a learned null embedding."""

    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.table = nn.Embedding(vocab_size, dim)
        self.null = nn.Parameter(torch.randn(dim) * 0.02)

    def forward(self, prompt_ids: torch.Tensor) -> torch.Tensor:
        if prompt_ids.ndim != 1:
            raise ModelError("prompt_ids must be a 1-D batch")
        is_null = prompt_ids < 0
        safe = prompt_ids.clamp(min=0)
        tok = self.table(safe)
        tok = torch.where(is_null[:, None], self.null[None, :].expand_as(tok), tok)
        return tok[:, None, :]


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x, t_emb=None):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def _encoder_plan(cfg: DenoiserConfig) -> list[tuple[str, int, int, int]]:
    """(kind, in_ch, out_ch, resolution) rows describing the shared encoder."""
    plan = [("conv_in", cfg.in_channels, cfg.base_channels, cfg.image_size)]
    ch = cfg.base_channels
    res = cfg.image_size
    for i, mult in enumerate(cfg.channel_mults):
        out = cfg.base_channels * mult
        for _ in range(cfg.num_res_blocks):
            plan.append(("res", ch, out, res))
            ch = out
            if res in cfg.attention_resolutions:
                plan.append(("attn", ch, ch, res))
        if i < len(cfg.channel_mults) - 1:
            plan.append(("down", ch, ch, res // 2))
            res //= 2
    return plan


class EncoderCore(nn.Module):
    """conv_in + downsampling path + middle, shared by denoiser and control branches."""

    def __init__(self, cfg: DenoiserConfig, with_lambda: bool = False):
        super().__init__()
        self.cfg = cfg
        lam_dim = cfg.lambda_embed_dim if with_lambda else None
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)
        self.downs = nn.ModuleList()
        self.skip_channels = [cfg.base_channels]
        plan = _encoder_plan(cfg)
        for kind, in_ch, out_ch, res in plan[1:]:
            if kind == "res":
                self.downs.append(ResBlock(in_ch, out_ch, cfg.time_embed_dim, cfg.norm_groups))
            elif kind == "attn":
                self.downs.append(AttentionBlock(out_ch, cfg.prompt_embed_dim, lam_dim))
                continue  # attention refines the previous skip in place
            else:
                self.downs.append(Downsample(out_ch))
            self.skip_channels.append(out_ch)
        mid_ch = cfg.base_channels * cfg.channel_mults[-1]
        self.mid_res1 = ResBlock(mid_ch, mid_ch, cfg.time_embed_dim, cfg.norm_groups)
        self.mid_attn = AttentionBlock(mid_ch, cfg.prompt_embed_dim, None)
        self.mid_res2 = ResBlock(mid_ch, mid_ch, cfg.time_embed_dim, cfg.norm_groups)
        self.mid_channels = mid_ch

    def forward(
        self,
        x: torch.Tensor,
        t_emb: torch.Tensor,
        prompt_tokens: torch.Tensor,
        lam_tokens: torch.Tensor | None = None,
        hint: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        skips = [h]
        for layer in self.downs:
            if isinstance(layer, ResBlock):
                h = layer(h, t_emb)
                skips.append(h)
            elif isinstance(layer, AttentionBlock):
                h = layer(h, prompt_tokens, lam_tokens if layer.has_extra else None)
                skips[-1] = h
            else:
                h = layer(h)
                skips.append(h)
        h = self.mid_res1(h, t_emb)
        h = self.mid_attn(h, prompt_tokens)
        h = self.mid_res2(h, t_emb)
        return h, skips


class HintEncoder(nn.Module):
    """Edge map -> feature plane added after conv_in; final conv starts at zero."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.SiLU(),
            zero_module(nn.Conv2d(32, cfg.base_channels, 3, padding=1)),
        )

    def forward(self, edge: torch.Tensor) -> torch.Tensor:
        return self.net(edge)


@dataclass
class ControlFeatures:
    skips: list[torch.Tensor]
    mid: torch.Tensor


class ControlBranch(nn.Module):
    """Encoder copy fed by the edge hint; residuals exit through zero projections."""

    def __init__(self, cfg: DenoiserConfig, with_lambda: bool = False):
        super().__init__()
        self.hint = HintEncoder(cfg)
        self.core = EncoderCore(cfg, with_lambda=with_lambda)
        self.skip_projs = nn.ModuleList(
            [zero_module(nn.Conv2d(ch, ch, 1)) for ch in self.core.skip_channels]
        )
        self.mid_proj = zero_module(nn.Conv2d(self.core.mid_channels, self.core.mid_channels, 1))

    def forward(
        self,
        z: torch.Tensor,
        t_emb: torch.Tensor,
        prompt_tokens: torch.Tensor,
        edge: torch.Tensor,
        lam_tokens: torch.Tensor | None = None,
    ) -> ControlFeatures:
        mid, skips = self.core(z, t_emb, prompt_tokens, lam_tokens, hint=self.hint(edge))
        return ControlFeatures(
            skips=[proj(s) for proj, s in zip(self.skip_projs, skips)],
            mid=self.mid_proj(mid),
        )


class AdapterBranch(ControlBranch):
    """Control branch with strength extra-attention and the strength embedder."""

    def __init__(self, cfg: DenoiserConfig, attribute_names: Sequence[str]):
        super().__init__(cfg, with_lambda=True)
        self.lam_embed = LambdaEmbedder(attribute_names, cfg.lambda_embed_dim)

    def copy_frozen_from(self, control: ControlBranch) -> None:
        """Overwrite the copied sub-weights from the base control branch."""
        missing, unexpected = self.load_state_dict(control.state_dict(), strict=False)
        if unexpected:
            raise ModelError(f"unexpected control keys {unexpected}")
        bad = [k for k in missing if not any(m in k for m in _ADAPTER_TRAINABLE_MARKS)]
        if bad:
            raise ModelError(f"adapter copy left non-trainable keys uninitialized: {bad}")


class UNetDenoiser(nn.Module):
    """Noise predictor; optionally consumes control residuals on its skips."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.time_embed = TimestepEmbedding(cfg.base_channels, cfg.time_embed_dim)
        self.core = EncoderCore(cfg, with_lambda=False)
        skip_channels = list(self.core.skip_channels)

        self.ups = nn.ModuleList()
        ch = self.core.mid_channels
        res = cfg.image_size // (2 ** (len(cfg.channel_mults) - 1))
        for i in reversed(range(len(cfg.channel_mults))):
            out = cfg.base_channels * cfg.channel_mults[i]
            for _ in range(cfg.num_res_blocks + 1):
                self.ups.append(ResBlock(ch + skip_channels.pop(), out, cfg.time_embed_dim, cfg.norm_groups))
                ch = out
                if res in cfg.attention_resolutions:
                    self.ups.append(AttentionBlock(ch, cfg.prompt_embed_dim, None))
            if i > 0:
                self.ups.append(Upsample(ch))
                res *= 2
        assert not skip_channels
        self.out_norm = nn.GroupNorm(cfg.norm_groups, ch)
        self.out_conv = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)

    def time_embedding(self, t: torch.Tensor | int, batch: int) -> torch.Tensor:
        if isinstance(t, int):
            t = torch.full((batch,), t, dtype=torch.float32)
        elif t.ndim == 0:
            t = t[None].expand(batch)
        return self.time_embed(t)

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor | int,
        prompt_tokens: torch.Tensor,
        control: ControlFeatures | None = None,
    ) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.cfg.in_channels:
            raise ModelError(f"expected (B, {self.cfg.in_channels}, H, W) latents, got {tuple(z.shape)}")
        t_emb = self.time_embedding(t, z.shape[0])
        h, skips = self.core(z, t_emb, prompt_tokens)
        if control is not None:
            if len(control.skips) != len(skips):
                raise ModelError("control feature count does not match skip count")
            skips = [s + c for s, c in zip(skips, control.skips)]
            h = h + control.mid
        for layer in self.ups:
            if isinstance(layer, ResBlock):
                h = layer(torch.cat([h, skips.pop()], dim=1), t_emb)
            elif isinstance(layer, AttentionBlock):
                h = layer(h, prompt_tokens)
            else:
                h = layer(h)
        return self.out_conv(F.silu(self.out_norm(h)))


class ModelBundle:
    """Denoiser + prompt table + control branch + adapter, with a frozen-weight hash.

    The denoiser, prompts, and control branch (plus the adapter's copied
    sub-weights) are frozen during adapter training; their fingerprint is
    stored in checkpoints and re-verified on load.
    """

    def __init__(
        self,
        cfg: DenoiserConfig,
        attributes: Sequence[str],
        schedule_spec: Mapping[str, object] | None = None,
    ):
        self.cfg = cfg
        self.attributes = tuple(attributes)
        self.schedule_spec = dict(schedule_spec or {"T": 1000, "beta_min": 1e-4, "beta_max": 0.02, "kind": "linear"})
        self.denoiser = UNetDenoiser(cfg)
        self.prompts = PromptConditioner(cfg.prompt_vocab_size, cfg.prompt_embed_dim)
        self.control = ControlBranch(cfg)
        self.adapter = AdapterBranch(cfg, self.attributes)
        self.adapter.copy_frozen_from(self.control)
        self.meta: dict = {}
        self._schedule: NoiseSchedule | None = None

    # -- construction ---------------------------------------------------------

    @classmethod
    def create(cls, cfg: DenoiserConfig, attributes: Sequence[str], seed: int = 0, **kw) -> "ModelBundle":
        torch.manual_seed(seed)
        return cls(cfg, attributes, **kw)

    def schedule(self) -> NoiseSchedule:
        if self._schedule is None:
            s = self.schedule_spec
            self._schedule = make_schedule(int(s["T"]), float(s["beta_min"]), float(s["beta_max"]), str(s["kind"]))
        return self._schedule

    def modules_by_name(self) -> dict[str, nn.Module]:
        return {"denoiser": self.denoiser, "prompts": self.prompts, "control": self.control, "adapter": self.adapter}

    def eval(self) -> "ModelBundle":
        for m in self.modules_by_name().values():
            m.eval()
        return self

    def sync_adapter(self) -> None:
        self.adapter.copy_frozen_from(self.control)

    # -- forward passes -------------------------------------------------------

    def prompt_tokens(self, prompt_ids: torch.Tensor) -> torch.Tensor:
        return self.prompts(prompt_ids)

    def denoise_base(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor | int,
        prompt_ids: torch.Tensor,
        control: ControlFeatures | None = None,
    ) -> torch.Tensor:
        return self.denoiser(z_t, t, self.prompt_tokens(prompt_ids), control)

    def control_features(
        self, edge: torch.Tensor, z_t: torch.Tensor, t: torch.Tensor | int, prompt_ids: torch.Tensor
    ) -> ControlFeatures:
        t_emb = self.denoiser.time_embedding(t, z_t.shape[0])
        return self.control(z_t, t_emb, self.prompt_tokens(prompt_ids), edge)

    def embed_lambda(self, style: StyleParams, batch: int = 1) -> torch.Tensor:
        if style.names != self.attributes:
            raise ModelError(f"style attributes {style.names} do not match model {self.attributes}")
        return self.adapter.lam_embed(style.tensor(batch))

    def null_param_tokens(self, batch: int = 1) -> torch.Tensor:
        return self.embed_lambda(StyleParams.zeros(self.attributes), batch)

    def adapter_forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor | int,
        edge: torch.Tensor,
        style: StyleParams | torch.Tensor,
        prompt_ids: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Adapter-steered noise prediction; style may be params or prebuilt tokens."""
        if prompt_ids is None:
            prompt_ids = torch.full((z_t.shape[0],), PROMPT_NULL_ID, dtype=torch.long)
        lam_tokens = style if isinstance(style, torch.Tensor) else self.embed_lambda(style, z_t.shape[0])
        prompt_tok = self.prompt_tokens(prompt_ids)
        t_emb = self.denoiser.time_embedding(t, z_t.shape[0])
        feats = self.adapter(z_t, t_emb, prompt_tok, edge, lam_tokens)
        return self.denoiser(z_t, t, prompt_tok, feats)

    # -- parameter bookkeeping --------------------------------------------------

    def named_parameters(self) -> dict[str, nn.Parameter]:
        out: dict[str, nn.Parameter] = {}
        for prefix, module in self.modules_by_name().items():
            for name, p in module.named_parameters():
                out[f"{prefix}.{name}"] = p
        return out

    def parameter_phase(self, name: str) -> str:
        """Phase owning a parameter: base, control, or adapter.

        The adapter's copied sub-weights belong to the control phase (they are
        the control weights, duplicated), so the three phases partition every
        parameter in the bundle.
        """
        if name.startswith(("denoiser.", "prompts.")):
            return "base"
        if name.startswith("adapter.") and any(m in name for m in _ADAPTER_TRAINABLE_MARKS):
            return "adapter"
        return "control"

    def trainable_parameters(self, phase: str) -> dict[str, nn.Parameter]:
        if phase not in ("base", "control", "adapter"):
            raise ModelError(f"unknown phase {phase!r}")
        return {n: p for n, p in self.named_parameters().items() if self.parameter_phase(n) == phase}

    def frozen_names_for_adapter_training(self) -> list[str]:
        return sorted(n for n in self.named_parameters() if self.parameter_phase(n) != "adapter")

    def fingerprint(self) -> str:
        """SHA-256 over all adapter-frozen weights in sorted name order."""
        params = self.named_parameters()
        digest = hashlib.sha256()
        for name in self.frozen_names_for_adapter_training():
            digest.update(name.encode())
            digest.update(params[name].detach().cpu().contiguous().to(torch.float32).numpy().tobytes())
        return digest.hexdigest()


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_bundle(bundle: ModelBundle, path: str | Path, meta: Mapping[str, object] | None = None) -> None:
    """Write the bundle container atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "styledial-bundle",
        "config": asdict(bundle.cfg),
        "attributes": list(bundle.attributes),
        "schedule": dict(bundle.schedule_spec),
        "state": {k: m.state_dict() for k, m in bundle.modules_by_name().items()},
        "frozen_fingerprint": bundle.fingerprint(),
        "meta": dict(bundle.meta, **(meta or {})),
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


def load_bundle(path: str | Path) -> ModelBundle:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("kind") != "styledial-bundle":
        raise ModelError(f"{path} is not a model bundle container")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = DenoiserConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in payload["config"].items()})
    bundle = ModelBundle(cfg, payload["attributes"], payload["schedule"])
    for key, module in bundle.modules_by_name().items():
        module.load_state_dict(payload["state"][key])
    bundle.meta = dict(payload.get("meta", {}))
    actual = bundle.fingerprint()
    if actual != payload["frozen_fingerprint"]:
        raise ModelError(
            f"frozen-weight fingerprint mismatch for {path}: stored "
            f"{payload['frozen_fingerprint'][:12]}.., recomputed {actual[:12]}.."
        )
    return bundle


def count_parameters(params: Iterable[nn.Parameter] | Mapping[str, nn.Parameter]) -> int:
    values = params.values() if isinstance(params, Mapping) else params
    return sum(p.numel() for p in values)
