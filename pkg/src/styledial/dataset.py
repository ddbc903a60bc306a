"""Synthetic training data: procedural scenes stylized at varied attribute strengths.

Each content image gets one zero-strength rendition plus k stylized variants
whose per-attribute strengths are drawn uniformly from (0, 1). Records land in
a JSON-lines manifest with fields {content, edge, stylized, lambda, prompt_id,
seed}; images are 8-bit PNGs.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .filters import apply_style, edge_map, validate_attributes
from .image import ImageBuffer, ImageError, load_png, save_png

PROMPT_VOCAB = (
    "circle",
    "two_circles",
    "square",
    "rectangles",
    "triangle",
    "ring",
    "cross",
    "diamond",
    "horizontal_stripes",
    "vertical_stripes",
    "checker",
    "dots",
    "half_split",
    "crescent",
    "bars",
    "corner_blob",
)

EDGE_LOW, EDGE_HIGH = 0.1, 0.3


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetRecord:
    content: str
    edge: str
    stylized: str
    strengths: dict[str, float]
    prompt_id: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "content": self.content,
                "edge": self.edge,
                "stylized": self.stylized,
                "lambda": self.strengths,
                "prompt_id": self.prompt_id,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        raw = json.loads(line)
        return cls(
            content=raw["content"],
            edge=raw["edge"],
            stylized=raw["stylized"],
            strengths={k: float(v) for k, v in raw["lambda"].items()},
            prompt_id=int(raw["prompt_id"]),
            seed=int(raw["seed"]),
        )

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.strengths.values())


# -- procedural scenes -----------------------------------------------------------


def _gradient_background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.uniform(0.15, 0.85, 3)
    c1 = rng.uniform(0.15, 0.85, 3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy - min(0, np.cos(angle)) - min(0, np.sin(angle)))
    ramp = ramp / max(abs(np.cos(angle)) + abs(np.sin(angle)), 1e-6)
    return c0[None, None, :] + ramp[:, :, None] * (c1 - c0)[None, None, :]


def _scene_mask(prompt: str, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = rng.uniform(0.3, 0.7, 2) * size
    r = rng.uniform(0.18, 0.32) * size
    if prompt == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
    if prompt == "two_circles":
        cx2, cy2 = rng.uniform(0.2, 0.8, 2) * size
        r2 = rng.uniform(0.1, 0.2) * size
        return ((xx - cx) ** 2 + (yy - cy) ** 2 < r * r) | ((xx - cx2) ** 2 + (yy - cy2) ** 2 < r2 * r2)
    if prompt == "square":
        return (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r)
    if prompt == "rectangles":
        w, h = rng.uniform(0.15, 0.35, 2) * size
        return (np.abs(xx - cx) < w) & (np.abs(yy - cy) < h)
    if prompt == "triangle":
        return (yy > cy - r) & (yy < cy + r) & (np.abs(xx - cx) < (yy - (cy - r)) / 2)
    if prompt == "ring":
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        return (d2 < r * r) & (d2 > (0.55 * r) ** 2)
    if prompt == "cross":
        t = max(2.0, 0.25 * r)
        return (np.abs(xx - cx) < t) | (np.abs(yy - cy) < t)
    if prompt == "diamond":
        return np.abs(xx - cx) + np.abs(yy - cy) < 1.2 * r
    if prompt == "horizontal_stripes":
        period = int(rng.integers(4, 9))
        return (yy.astype(int) // period) % 2 == 0
    if prompt == "vertical_stripes":
        period = int(rng.integers(4, 9))
        return (xx.astype(int) // period) % 2 == 0
    if prompt == "checker":
        period = int(rng.integers(4, 9))
        return ((xx.astype(int) // period) + (yy.astype(int) // period)) % 2 == 0
    if prompt == "dots":
        period = int(rng.integers(6, 10))
        return ((xx % period) - period / 2) ** 2 + ((yy % period) - period / 2) ** 2 < (period / 3.2) ** 2
    if prompt == "half_split":
        return xx < cx
    if prompt == "crescent":
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        shift = 0.45 * r
        d2b = (xx - cx - shift) ** 2 + (yy - cy) ** 2
        return (d2 < r * r) & (d2b > (0.8 * r) ** 2)
    if prompt == "bars":
        w = int(rng.integers(2, 5))
        gap = int(rng.integers(3, 6))
        return ((xx.astype(int) % (w + gap)) < w) & (np.abs(yy - cy) < 1.6 * r)
    if prompt == "corner_blob":
        cx, cy = rng.choice([0.18, 0.82], 2) * size
        return (xx - cx) ** 2 + (yy - cy) ** 2 < (1.3 * r) ** 2
    raise DatasetError(f"no generator for prompt {prompt!r}")


def generate_scene(prompt_id: int, rng: np.random.Generator, size: int = 32) -> ImageBuffer:
    """Procedural content image for one prompt token."""
    if not 0 <= prompt_id < len(PROMPT_VOCAB):
        raise DatasetError(f"prompt_id {prompt_id} outside vocabulary of {len(PROMPT_VOCAB)}")
    bg = _gradient_background(rng, size)
    mask = _scene_mask(PROMPT_VOCAB[prompt_id], rng, size)
    fill = rng.uniform(0.05, 0.95, 3)
    img = np.where(mask[:, :, None], fill[None, None, :], bg)
    return ImageBuffer(np.clip(img, 0.0, 1.0))


# -- building -------------------------------------------------------------------


def _image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _draw_strength(rng: np.random.Generator) -> float:
    u = float(rng.uniform(0.0, 1.0))
    while u == 0.0:
        u = float(rng.uniform(0.0, 1.0))
    return u


def _build_one(out_dir: Path, attributes: Sequence[str], index: int, seed: int,
               k_variants: int, image_size: int) -> list[DatasetRecord]:
    img_seed = _image_seed(seed, index)
    rng = np.random.default_rng(img_seed)
    prompt_id = int(rng.integers(len(PROMPT_VOCAB)))
    scene = generate_scene(prompt_id, rng, image_size)

    content_rel = f"content/{index:05d}.png"
    edge_rel = f"edges/{index:05d}.png"
    save_png(scene, out_dir / content_rel)
    content = load_png(out_dir / content_rel)  # filters act on the quantized image
    save_png(edge_map(content, EDGE_LOW, EDGE_HIGH), out_dir / edge_rel)

    records = []
    for v in range(k_variants + 1):
        if v == 0:
            strengths = {a: 0.0 for a in attributes}
        else:
            strengths = {a: _draw_strength(rng) for a in attributes}
        stylized_rel = f"stylized/{index:05d}_v{v:02d}.png"
        save_png(apply_style(content, strengths), out_dir / stylized_rel)
        records.append(
            DatasetRecord(content_rel, edge_rel, stylized_rel, strengths, prompt_id, img_seed)
        )
    return records


def build_dataset(
    out_dir: str | Path,
    attributes: Sequence[str],
    n_content: int,
    k_variants: int,
    seed: int = 0,
    image_size: int = 32,
    workers: int = 2,
) -> Path:
    """Generate scenes, edge maps, and stylized variants; returns the manifest path.

    Deterministic: every image derives its own seed from (seed, image index),
    so parallel generation and reruns produce identical bytes.
    """
    validate_attributes(attributes)
    if n_content < 1 or k_variants < 1:
        raise DatasetError("n_content and k_variants must be >= 1")
    out = Path(out_dir)
    manifest = out / "manifest.jsonl"
    if manifest.exists():
        raise DatasetError(f"manifest already exists: {manifest}")
    out.mkdir(parents=True, exist_ok=True)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [
            pool.submit(_build_one, out, tuple(attributes), i, seed, k_variants, image_size)
            for i in range(n_content)
        ]
        per_image = [f.result() for f in futures]

    with open(manifest, "w") as fh:
        for records in per_image:
            for rec in records:
                fh.write(rec.to_json() + "\n")
    with open(out / "dataset.json", "w") as fh:
        json.dump(
            {
                "attributes": list(attributes),
                "n_content": n_content,
                "k_variants": k_variants,
                "seed": seed,
                "image_size": image_size,
                "prompt_vocab": list(PROMPT_VOCAB),
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    return manifest


# -- loading --------------------------------------------------------------------


def _to_latent(img: ImageBuffer) -> torch.Tensor:
    arr = np.transpose(img.data, (2, 0, 1)).astype(np.float32)
    return torch.from_numpy(2.0 * arr - 1.0)


class DatasetView:
    """In-memory view over a manifest: latents, edges, prompts, strengths."""

    def __init__(self, root: Path, records: list[DatasetRecord], attributes: Sequence[str]):
        self.root = root
        self.records = records
        self.attributes = tuple(attributes)
        for rec in records:
            if set(rec.strengths) != set(self.attributes):
                raise DatasetError(f"record attributes {sorted(rec.strengths)} != {sorted(self.attributes)}")

        stylized = {}
        edges = {}
        for rec in records:
            if rec.stylized not in stylized:
                stylized[rec.stylized] = _to_latent(load_png(root / rec.stylized))
            if rec.edge not in edges:
                edges[rec.edge] = torch.from_numpy(load_png(root / rec.edge).data[None, :, :, 0].copy())
        self._stylized = stylized
        self._edges = edges

        self.zero_indices = np.array([i for i, r in enumerate(records) if r.is_zero()], dtype=np.int64)
        self.variant_indices = np.array([i for i, r in enumerate(records) if not r.is_zero()], dtype=np.int64)
        zero_by_content = {records[int(i)].content: int(i) for i in self.zero_indices}
        self._zero_sibling = {}
        for i in self.variant_indices:
            rec = records[int(i)]
            if rec.content not in zero_by_content:
                raise DatasetError(f"variant {rec.stylized} has no zero-strength sibling")
            self._zero_sibling[int(i)] = zero_by_content[rec.content]

    def __len__(self) -> int:
        return len(self.records)

    def strengths_tensor(self, rec: DatasetRecord) -> torch.Tensor:
        return torch.tensor([rec.strengths[a] for a in self.attributes], dtype=torch.float32)

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """(z0, edge, prompt_ids, strengths) stacks for the given record indices."""
        recs = [self.records[int(i)] for i in indices]
        z0 = torch.stack([self._stylized[r.stylized] for r in recs])
        edge = torch.stack([self._edges[r.edge] for r in recs])
        prompt_ids = torch.tensor([r.prompt_id for r in recs], dtype=torch.long)
        strengths = torch.stack([self.strengths_tensor(r) for r in recs])
        return z0, edge, prompt_ids, strengths

    def paired_arrays(self, indices) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """(z0_k, z0_zero, strengths, edge, prompt_ids) for stylized variant indices."""
        recs = [self.records[int(i)] for i in indices]
        z0_k = torch.stack([self._stylized[r.stylized] for r in recs])
        zero_recs = [self.records[self._zero_sibling[int(i)]] for i in indices]
        z0_zero = torch.stack([self._stylized[r.stylized] for r in zero_recs])
        strengths = torch.stack([self.strengths_tensor(r) for r in recs])
        edge = torch.stack([self._edges[r.edge] for r in recs])
        prompt_ids = torch.tensor([r.prompt_id for r in recs], dtype=torch.long)
        return z0_k, z0_zero, strengths, edge, prompt_ids

    def edge_tensor(self, index: int) -> torch.Tensor:
        return self._edges[self.records[index].edge][None]

    def record(self, index: int) -> DatasetRecord:
        return self.records[index]


def load_manifest(manifest: str | Path) -> list[DatasetRecord]:
    manifest = Path(manifest)
    if not manifest.exists():
        raise DatasetError(f"manifest not found: {manifest}")
    with open(manifest) as fh:
        return [DatasetRecord.from_json(line) for line in fh if line.strip()]


def load_dataset(manifest: str | Path) -> DatasetView:
    manifest = Path(manifest)
    records = load_manifest(manifest)
    meta_path = manifest.parent / "dataset.json"
    if meta_path.exists():
        with open(meta_path) as fh:
            attributes = json.load(fh)["attributes"]
    else:
        attributes = sorted(records[0].strengths) if records else []
    return DatasetView(manifest.parent, records, attributes)
