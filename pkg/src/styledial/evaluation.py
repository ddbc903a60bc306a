"""Quantitative studies: distance proxy, strength sweeps, smoothness, act/strength heatmap."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter
from typing import Sequence

import numpy as np

from .diffusion import GuidanceConfig
from .filters import gaussian_blur
from .image import ImageBuffer
from .model import ModelBundle, StyleParams
from .sampling import SampleCond, sample


class EvaluationError(RuntimeError):
    pass


def _pyramid(data: np.ndarray, levels: int) -> list[np.ndarray]:
    out = [data.astype(np.float64)]
    for _ in range(levels - 1):
        prev = out[-1]
        blurred = np.stack([gaussian_blur(prev[:, :, c], 1.0) for c in range(prev.shape[2])], axis=2)
        out.append(blurred[::2, ::2, :])
    return out


def perceptual_distance(a: ImageBuffer, b: ImageBuffer, levels: int = 3) -> float:
    """Pyramid-L1 proxy for perceptual distance.

    Mean over Gaussian-pyramid levels of mean|a-b| / (mean|a| + mean|b| + 1e-6).
    Symmetric, zero iff the images are equal; no triangle inequality claimed.
    """
    if a.data.shape != b.data.shape:
        raise EvaluationError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    pa = _pyramid(a.data, levels)
    pb = _pyramid(b.data, levels)
    vals = []
    for la, lb in zip(pa, pb):
        num = float(np.mean(np.abs(la - lb)))
        den = float(np.mean(np.abs(la)) + np.mean(np.abs(lb)) + 1e-6)
        vals.append(num / den)
    return float(np.mean(vals))


def smoothness(curve: Sequence[float]) -> float:
    """Population standard deviation of consecutive increments (lower = smoother).

    Stands in for the step-transition-deviation smoothness score; labeled as a
    proxy in every output.
    """
    arr = np.asarray(curve, dtype=np.float64)
    if arr.ndim != 1 or len(arr) < 2:
        raise EvaluationError("smoothness needs a 1-D curve with >= 2 points")
    return float(np.std(np.diff(arr)))


@dataclass
class SweepResult:
    attribute: str
    grid: list[float]
    seeds: list[int]
    curves: np.ndarray  # (n_seeds, n_grid) distances vs the zero-strength output
    mean_curve: np.ndarray
    smoothness_per_seed: list[float]
    smoothness_score: float  # mean over per-seed smoothness
    runtime_s: float
    kind: str = "strength"  # or "cfg_scale"

    def __post_init__(self):
        if any(b < a for a, b in zip(self.grid, self.grid[1:])):
            raise EvaluationError("sweep grid must be nondecreasing")
        if self.curves.shape != (len(self.seeds), len(self.grid)):
            raise EvaluationError("curve matrix shape mismatch")


def _batched_outputs(bundle, cond, cfg, steps, seeds) -> list[ImageBuffer]:
    return sample(bundle, cond, cfg, steps=steps, seeds=list(seeds)).images


def sweep(
    bundle: ModelBundle,
    prompt_id: int,
    edge,
    attribute: str,
    grid: Sequence[float],
    seeds: Sequence[int],
    cfg: GuidanceConfig | None = None,
    steps: int = 50,
) -> SweepResult:
    """Distance-vs-strength curves: per seed, fix z_T and vary only one attribute.

    Distances are measured against the zero-strength output of the same seed,
    so the curve starts at exactly 0 when the grid contains 0.
    """
    if attribute not in bundle.attributes:
        raise EvaluationError(f"attribute {attribute!r} not in bundle {bundle.attributes}")
    cfg = cfg if cfg is not None else GuidanceConfig()
    grid = [float(g) for g in grid]
    seeds = [int(s) for s in seeds]
    t0 = perf_counter()

    zero = StyleParams.zeros(bundle.attributes)
    baseline = _batched_outputs(bundle, SampleCond(prompt_id, edge, zero), cfg, steps, seeds)
    curves = np.zeros((len(seeds), len(grid)))
    cache: dict[float, list[ImageBuffer]] = {0.0: baseline}
    for j, value in enumerate(grid):
        if value not in cache:
            style = StyleParams.from_mapping(bundle.attributes, {attribute: value})
            cache[value] = _batched_outputs(bundle, SampleCond(prompt_id, edge, style), cfg, steps, seeds)
        outs = cache[value]
        for i in range(len(seeds)):
            curves[i, j] = perceptual_distance(outs[i], baseline[i])
    per_seed = [smoothness(curves[i]) for i in range(len(seeds))]
    return SweepResult(
        attribute=attribute,
        grid=grid,
        seeds=seeds,
        curves=curves,
        mean_curve=curves.mean(axis=0),
        smoothness_per_seed=per_seed,
        smoothness_score=float(np.mean(per_seed)),
        runtime_s=perf_counter() - t0,
    )


def cfg_scale_sweep(
    bundle: ModelBundle,
    prompt_id: int,
    edge,
    grid: Sequence[float],
    seeds: Sequence[int],
    cfg: GuidanceConfig | None = None,
    steps: int = 50,
) -> SweepResult:
    """Edit-strength emulation via the prompt CfG scale (no effect guidance).

    Distances are measured against the first grid point's output per seed.
    """
    cfg = cfg if cfg is not None else GuidanceConfig()
    grid = [float(g) for g in grid]
    seeds = [int(s) for s in seeds]
    t0 = perf_counter()
    zero = StyleParams.zeros(bundle.attributes)
    cond = SampleCond(prompt_id, edge, zero)

    outputs = []
    for value in grid:
        swept = GuidanceConfig(w1=value, w2=0.0, act_t=cfg.act_t, w=value)
        outputs.append(_batched_outputs(bundle, cond, swept, steps, seeds))
    curves = np.zeros((len(seeds), len(grid)))
    for j, outs in enumerate(outputs):
        for i in range(len(seeds)):
            curves[i, j] = perceptual_distance(outs[i], outputs[0][i])
    per_seed = [smoothness(curves[i]) for i in range(len(seeds))]
    return SweepResult(
        attribute="cfg_scale",
        grid=grid,
        seeds=seeds,
        curves=curves,
        mean_curve=curves.mean(axis=0),
        smoothness_per_seed=per_seed,
        smoothness_score=float(np.mean(per_seed)),
        runtime_s=perf_counter() - t0,
        kind="cfg_scale",
    )


@dataclass
class HeatmapResult:
    attribute: str
    act_grid: list[float]
    lambda_grid: list[float]
    seeds: list[int]
    mean: np.ndarray  # (n_act, n_lambda) mean distance vs the w2=0 output
    std: np.ndarray


def heatmap(
    bundle: ModelBundle,
    prompt_id: int,
    edge,
    attribute: str,
    act_grid: Sequence[float],
    lambda_grid: Sequence[float],
    seeds: Sequence[int],
    cfg: GuidanceConfig | None = None,
    steps: int = 50,
) -> HeatmapResult:
    """Mean distance to the no-effect output per (act_t, strength) cell."""
    if attribute not in bundle.attributes:
        raise EvaluationError(f"attribute {attribute!r} not in bundle {bundle.attributes}")
    cfg = cfg if cfg is not None else GuidanceConfig()
    act_grid = [float(a) for a in act_grid]
    lambda_grid = [float(v) for v in lambda_grid]
    seeds = [int(s) for s in seeds]

    zero = StyleParams.zeros(bundle.attributes)
    off = GuidanceConfig(w1=cfg.w1, w2=0.0, act_t=cfg.act_t, w=cfg.w)
    baseline = _batched_outputs(bundle, SampleCond(prompt_id, edge, zero), off, steps, seeds)

    mean = np.zeros((len(act_grid), len(lambda_grid)))
    std = np.zeros_like(mean)
    for r, act in enumerate(act_grid):
        for c, value in enumerate(lambda_grid):
            cell_cfg = GuidanceConfig(w1=cfg.w1, w2=cfg.w2, act_t=act, w=cfg.w)
            style = StyleParams.from_mapping(bundle.attributes, {attribute: value})
            outs = _batched_outputs(bundle, SampleCond(prompt_id, edge, style), cell_cfg, steps, seeds)
            dists = [perceptual_distance(o, b) for o, b in zip(outs, baseline)]
            mean[r, c] = float(np.mean(dists))
            std[r, c] = float(np.std(dists))
    return HeatmapResult(attribute, act_grid, lambda_grid, seeds, mean, std)


# -- reporting ------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def write_sweep_csv(result: SweepResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attribute", "seed", "lambda", "distance"])
        for i, seed in enumerate(result.seeds):
            for j, value in enumerate(result.grid):
                writer.writerow([result.attribute, seed, _fmt(value), _fmt(result.curves[i, j])])


def write_heatmap_csv(result: HeatmapResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["act_t", "lambda", "mean_distance", "std"])
        for r, act in enumerate(result.act_grid):
            for c, value in enumerate(result.lambda_grid):
                writer.writerow([_fmt(act), _fmt(value), _fmt(result.mean[r, c]), _fmt(result.std[r, c])])


def report(
    out_dir: str | Path,
    sweeps: Sequence[SweepResult] = (),
    heatmaps: Sequence[HeatmapResult] = (),
    bundle: ModelBundle | None = None,
    extra: dict | None = None,
) -> dict[str, Path]:
    """CSV tables, plot images, and a JSON summary with config hashes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, Path] = {}

    summary: dict = {
        "smoothness_metric": "std of consecutive increments (step-deviation proxy)",
        "distance_metric": "3-level Gaussian-pyramid normalized L1 proxy",
        "sweeps": [],
        "heatmaps": [],
    }
    if bundle is not None:
        summary["bundle_fingerprint"] = bundle.fingerprint()
        summary["attributes"] = list(bundle.attributes)
    if extra:
        summary.update(extra)

    for result in sweeps:
        stem = f"sweep_{result.kind}_{result.attribute}"
        csv_path = out / f"{stem}.csv"
        write_sweep_csv(result, csv_path)
        files[f"{stem}.csv"] = csv_path

        fig, ax = plt.subplots(figsize=(5, 3.5))
        for i in range(len(result.seeds)):
            ax.plot(result.grid, result.curves[i], color="tab:blue", alpha=0.25, lw=0.8)
        ax.plot(result.grid, result.mean_curve, color="tab:blue", lw=2.2, label="mean")
        ax.set_xlabel("strength" if result.kind == "strength" else "cfg scale")
        ax.set_ylabel("distance to unedited")
        ax.set_title(f"{result.attribute} (smoothness {result.smoothness_score:.4f})")
        ax.legend()
        fig.tight_layout()
        plot_path = out / f"{stem}.png"
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
        files[f"{stem}.png"] = plot_path
        summary["sweeps"].append(
            {
                "attribute": result.attribute,
                "kind": result.kind,
                "grid": result.grid,
                "seeds": result.seeds,
                "mean_curve": [float(v) for v in result.mean_curve],
                "smoothness_score": result.smoothness_score,
                "runtime_s": result.runtime_s,
                "csv_sha256": hashlib.sha256(csv_path.read_bytes()).hexdigest(),
            }
        )

    for result in heatmaps:
        stem = f"heatmap_{result.attribute}"
        csv_path = out / f"{stem}.csv"
        write_heatmap_csv(result, csv_path)
        files[f"{stem}.csv"] = csv_path

        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(result.mean, origin="upper", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(result.lambda_grid)), [f"{v:g}" for v in result.lambda_grid])
        ax.set_yticks(range(len(result.act_grid)), [f"{v:g}" for v in result.act_grid])
        ax.set_xlabel("strength")
        ax.set_ylabel("act_t")
        ax.set_title(f"distance vs no-effect output: {result.attribute}")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        plot_path = out / f"{stem}.png"
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
        files[f"{stem}.png"] = plot_path
        summary["heatmaps"].append(
            {
                "attribute": result.attribute,
                "act_grid": result.act_grid,
                "lambda_grid": result.lambda_grid,
                "seeds": result.seeds,
                "mean": [[float(v) for v in row] for row in result.mean],
                "csv_sha256": hashlib.sha256(csv_path.read_bytes()).hexdigest(),
            }
        )

    summary_path = out / "summary.json"
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    files["summary.json"] = summary_path
    return files
