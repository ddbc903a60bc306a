"""HTTP editing service: model registry, FIFO job queue, generate/edit/invert/sweep.

One worker thread serializes inference per model bundle; request acceptance
never blocks on inference (bounded queue of 64 jobs per model). Identical
payloads produce byte-identical results regardless of queue interleaving.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import io
import itertools
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse

from .dataset import generate_scene
from .diffusion import GuidanceConfig
from .evaluation import perceptual_distance
from .filters import edge_map
from .image import ImageBuffer, from_png_bytes, png_bytes
from .inversion import InversionRecord, invert_image
from .model import ModelBundle, StyleParams, load_bundle
from .sampling import SampleCond, edge_tensor, sample

QUEUE_LIMIT = 64


@dataclass
class Job:
    id: str
    kind: str
    model: str
    payload: dict
    state: str = "queued"  # queued -> running -> done | failed
    result: dict | None = None
    error: str | None = None
    timings: dict = field(default_factory=dict)

    def public(self) -> dict:
        out = {
            "id": self.id,
            "kind": self.kind,
            "model": self.model,
            "state": self.state,
            "timings": self.timings,
        }
        if self.state == "done":
            out["result"] = self.result
        if self.state == "failed":
            out["error"] = self.error
        return out


class ModelEntry:
    """A loaded bundle plus its serialized inference worker."""

    def __init__(self, name: str, path: str | Path):
        self.name = name
        self.path = str(path)
        self.bundle: ModelBundle = load_bundle(path)  # verifies the fingerprint
        self.bundle.eval()
        self.fingerprint = self.bundle.fingerprint()
        self.queue: queue.Queue = queue.Queue(maxsize=QUEUE_LIMIT)
        self.baseline_cache: dict[tuple, ImageBuffer] = {}
        self.inversions: dict[str, InversionRecord] = {}
        self.inversion_by_key: dict[tuple, str] = {}
        self.thread: threading.Thread | None = None

    def registry_entry(self) -> dict:
        return {
            "id": self.name,
            "checkpoint": self.path,
            "attributes": list(self.bundle.attributes),
            "fingerprint": self.fingerprint,
            "resolution": self.bundle.cfg.image_size,
        }


class EditService:
    def __init__(self, bundles: dict[str, str | Path]):
        self.models: dict[str, ModelEntry] = {name: ModelEntry(name, path) for name, path in bundles.items()}
        self.jobs: dict[str, Job] = {}
        self.lock = threading.RLock()
        self._stop = object()
        for entry in self.models.values():
            entry.thread = threading.Thread(target=self._worker, args=(entry,), daemon=True)
            entry.thread.start()

    def shutdown(self) -> None:
        for entry in self.models.values():
            entry.queue.put(self._stop)
        for entry in self.models.values():
            if entry.thread is not None:
                entry.thread.join(timeout=5)

    # -- job plumbing ----------------------------------------------------------

    def entry(self, model: str) -> ModelEntry:
        if model not in self.models:
            raise HTTPException(404, f"unknown model {model!r}")
        return self.models[model]

    def submit(self, kind: str, model: str, payload: dict) -> Job:
        entry = self.entry(model)
        job = Job(id=uuid.uuid4().hex[:12], kind=kind, model=model, payload=payload)
        job.timings["enqueued_at"] = time.time()
        with self.lock:
            self.jobs[job.id] = job
        try:
            entry.queue.put_nowait(job)
        except queue.Full:
            with self.lock:
                del self.jobs[job.id]
            raise HTTPException(503, "job queue full")
        return job

    def job(self, job_id: str) -> Job:
        with self.lock:
            if job_id not in self.jobs:
                raise HTTPException(404, f"unknown job {job_id!r}")
            return self.jobs[job_id]

    def _worker(self, entry: ModelEntry) -> None:
        while True:
            item = entry.queue.get()
            if item is self._stop:
                return
            job: Job = item
            job.state = "running"
            job.timings["started_at"] = time.time()
            try:
                handler = getattr(self, f"_run_{job.kind}")
                job.result = handler(entry, job.payload)
                job.state = "done"
            except HTTPException as exc:
                job.error = f"{exc.status_code}: {exc.detail}"
                job.state = "failed"
            except Exception as exc:  # noqa: BLE001
                job.error = f"{type(exc).__name__}: {exc}"
                job.state = "failed"
            finally:
                job.timings["finished_at"] = time.time()

    # -- shared helpers ----------------------------------------------------------

    def _conditioning(self, entry: ModelEntry, prompt_id: int, seed: int):
        """Deterministic layout anchor: edge map of a procedural scene."""
        if not 0 <= prompt_id < entry.bundle.cfg.prompt_vocab_size:
            raise HTTPException(422, f"prompt_id must be in [0, {entry.bundle.cfg.prompt_vocab_size})")
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(prompt_id)]))
        scene = generate_scene(prompt_id, rng, entry.bundle.cfg.image_size)
        return edge_tensor(edge_map(scene))

    def _style(self, entry: ModelEntry, strengths: dict) -> StyleParams:
        if not isinstance(strengths, dict):
            raise HTTPException(422, "lambda must be an object of attribute -> strength")
        unknown = set(strengths) - set(entry.bundle.attributes)
        if unknown:
            raise HTTPException(422, f"unknown attributes {sorted(unknown)}; model has {list(entry.bundle.attributes)}")
        values = {}
        for name, raw in strengths.items():
            try:
                v = float(raw)
            except (TypeError, ValueError):
                raise HTTPException(422, f"strength for {name!r} is not a number")
            if not np.isfinite(v) or not 0.0 <= v <= 2.0:
                raise HTTPException(422, f"strength for {name!r} must be in [0, 2]")
            values[name] = v
        return StyleParams.from_mapping(entry.bundle.attributes, values)

    def _baseline(self, entry: ModelEntry, prompt_id: int, seed: int, steps: int, w1: float) -> ImageBuffer:
        key = (prompt_id, seed, steps, w1)
        if key not in entry.baseline_cache:
            edge = self._conditioning(entry, prompt_id, seed)
            cfg = GuidanceConfig(w1=w1, w2=0.0, act_t=0.1, w=w1)
            cond = SampleCond(prompt_id, edge, StyleParams.zeros(entry.bundle.attributes))
            out = sample(entry.bundle, cond, cfg, steps=steps, seed=seed).image
            if len(entry.baseline_cache) > 256:
                entry.baseline_cache.clear()
            entry.baseline_cache[key] = out
        return entry.baseline_cache[key]

    @staticmethod
    def _b64(img: ImageBuffer) -> str:
        return base64.b64encode(png_bytes(img)).decode()

    # -- job handlers -------------------------------------------------------------

    def _run_generate(self, entry: ModelEntry, payload: dict) -> dict:
        prompt_id = int(payload.get("prompt_id", 0))
        seed = int(payload.get("seed", 0))
        steps = int(payload.get("steps", 50))
        w1 = float(payload.get("w1", 7.5))
        image = self._baseline(entry, prompt_id, seed, steps, w1)
        return {
            "image": self._b64(image),
            "prompt_id": prompt_id,
            "seed": seed,
            "steps": steps,
            "w1": w1,
            "image_sha256": hashlib.sha256(png_bytes(image)).hexdigest(),
        }

    def _run_edit(self, entry: ModelEntry, payload: dict) -> dict:
        base = payload.get("base") or {}
        style = self._style(entry, payload.get("lambda") or {})
        w2 = float(payload.get("w2", 3.0))
        act_t = float(payload.get("act_t", 0.1))
        w1 = float(payload.get("w1", 7.5))
        steps = int(payload.get("steps", 50))
        if not 0.0 <= act_t <= 1.0:
            raise HTTPException(422, "act_t must be in [0, 1]")
        cfg = GuidanceConfig(w1=w1, w2=w2, act_t=act_t, w=w1)

        if "inversion_id" in base:
            record = self._inversion_record(entry, base["inversion_id"])
            from .inversion import edit_inverted

            edited = edit_inverted(entry.bundle, record, style, cfg)
            baseline = record.reconstruction
        elif "seed" in base:
            seed = int(base["seed"])
            prompt_id = int(base.get("prompt_id", payload.get("prompt_id", 0)))
            edge = self._conditioning(entry, prompt_id, seed)
            cond = SampleCond(prompt_id, edge, style)
            edited = sample(entry.bundle, cond, cfg, steps=steps, seed=seed).image
            baseline = self._baseline(entry, prompt_id, seed, steps, w1)
        else:
            raise HTTPException(422, "base must provide seed or inversion_id")

        return {
            "image": self._b64(edited),
            "lambda": dict(zip(style.names, style.values)),
            "w2": w2,
            "act_t": act_t,
            "distance_to_base": perceptual_distance(edited, baseline),
            "image_sha256": hashlib.sha256(png_bytes(edited)).hexdigest(),
        }

    def _inversion_record(self, entry: ModelEntry, inversion_id: str) -> InversionRecord:
        if inversion_id not in entry.inversions:
            raise HTTPException(404, f"unknown inversion {inversion_id!r}")
        return entry.inversions[inversion_id]

    def _run_invert(self, entry: ModelEntry, payload: dict) -> dict:
        raw = payload.get("image")
        if not raw:
            raise HTTPException(422, "image (base64 PNG) is required")
        try:
            img = from_png_bytes(base64.b64decode(raw))
        except Exception:  # noqa: BLE001
            raise HTTPException(422, "image is not decodable base64 PNG")
        size = entry.bundle.cfg.image_size
        if img.data.shape[:2] != (size, size) or img.channels != 3:
            from PIL import Image

            pil = Image.fromarray(np.round(img.data * 255).astype(np.uint8).squeeze()).convert("RGB")
            pil = pil.resize((size, size), Image.LANCZOS)
            img = ImageBuffer(np.asarray(pil, dtype=np.float32) / 255.0)
        prompt_id = int(payload.get("prompt_id", 0))
        iterations = int(payload.get("iterations", 10))
        steps = int(payload.get("steps", 50))

        key = (entry.fingerprint, img.content_hash(), iterations, steps, prompt_id)
        if key in entry.inversion_by_key:
            inversion_id = entry.inversion_by_key[key]
            record = entry.inversions[inversion_id]
        else:
            edge = edge_tensor(edge_map(img))
            record = invert_image(
                entry.bundle, img, prompt_id, edge, steps=steps, iterations=iterations,
            )
            inversion_id = uuid.uuid4().hex[:12]
            entry.inversions[inversion_id] = record
            entry.inversion_by_key[key] = inversion_id
        return {
            "inversion_id": inversion_id,
            "reconstruction": self._b64(record.reconstruction),
            "psnr": record.recon_psnr,
        }

    def _run_sweep(self, entry: ModelEntry, payload: dict) -> dict:
        base = payload.get("base") or {}
        attribute = payload.get("attribute")
        if attribute not in entry.bundle.attributes:
            raise HTTPException(422, f"unknown attribute {attribute!r}")
        grid = [float(g) for g in payload.get("grid") or [round(0.1 * i, 10) for i in range(11)]]
        w1 = float(payload.get("w1", 7.5))
        w2 = float(payload.get("w2", 3.0))
        act_t = float(payload.get("act_t", 0.1))
        steps = int(payload.get("steps", 50))
        cfg = GuidanceConfig(w1=w1, w2=w2, act_t=act_t, w=w1)

        if "seed" in base:
            seed = int(base["seed"])
            prompt_id = int(base.get("prompt_id", 0))
            edge = self._conditioning(entry, prompt_id, seed)
            baseline = self._baseline(entry, prompt_id, seed, steps, w1)

            def render(value: float) -> ImageBuffer:
                style = StyleParams.from_mapping(entry.bundle.attributes, {attribute: value})
                return sample(entry.bundle, SampleCond(prompt_id, edge, style), cfg, steps=steps, seed=seed).image

        elif "inversion_id" in base:
            record = self._inversion_record(entry, base["inversion_id"])
            from .inversion import edit_inverted

            baseline = record.reconstruction

            def render(value: float) -> ImageBuffer:
                style = StyleParams.from_mapping(entry.bundle.attributes, {attribute: value})
                return edit_inverted(entry.bundle, record, style, cfg)

        else:
            raise HTTPException(422, "base must provide seed or inversion_id")

        images, distances = [], []
        for value in grid:
            img = render(value)
            images.append(self._b64(img))
            distances.append(perceptual_distance(img, baseline))
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["attribute", "lambda", "distance"])
        for value, dist in zip(grid, distances):
            writer.writerow([attribute, f"{value:.10g}", f"{dist:.10g}"])
        return {
            "attribute": attribute,
            "grid": grid,
            "images": images,
            "distances": distances,
            "curve_csv": buf.getvalue(),
        }


def create_app(bundles: dict[str, str | Path], ui_dir: str | Path | None = None) -> FastAPI:
    """Build the FastAPI app over the given {name: checkpoint path} registry."""
    from contextlib import asynccontextmanager

    service = EditService(bundles)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        service.shutdown()

    app = FastAPI(title="styledial edit service", lifespan=lifespan)
    app.state.service = service

    @app.exception_handler(HTTPException)
    async def _http_error(request: Request, exc: HTTPException):
        return JSONResponse(status_code=exc.status_code, content={"code": exc.status_code, "message": str(exc.detail)})

    @app.get("/api/health")
    def health() -> dict:
        return {"status": "ok", "models": sorted(service.models)}

    @app.get("/api/models")
    def models() -> list[dict]:
        return [entry.registry_entry() for entry in service.models.values()]

    @app.post("/api/generate")
    async def generate(request: Request) -> dict:
        payload = await request.json()
        return service.submit("generate", payload.get("model", ""), payload).public()

    @app.post("/api/edit")
    async def edit(request: Request) -> dict:
        payload = await request.json()
        entry = service.entry(payload.get("model", ""))
        service._style(entry, payload.get("lambda") or {})  # validate before enqueueing
        act_t = float(payload.get("act_t", 0.1))
        if not 0.0 <= act_t <= 1.0:
            raise HTTPException(422, "act_t must be in [0, 1]")
        return service.submit("edit", payload.get("model", ""), payload).public()

    @app.post("/api/invert")
    async def invert(request: Request) -> dict:
        payload = await request.json()
        return service.submit("invert", payload.get("model", ""), payload).public()

    @app.post("/api/sweep")
    async def sweep(request: Request) -> dict:
        payload = await request.json()
        return service.submit("sweep", payload.get("model", ""), payload).public()

    @app.get("/api/jobs/{job_id}")
    def job_state(job_id: str) -> dict:
        return service.job(job_id).public()

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
