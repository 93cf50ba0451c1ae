"""HTTP service exposing mask-conditioned generation to UI clients.

Wraps cascade sampling behind a small JSON API:

    POST /v1/generate            enqueue a job, returns 202 {job_id}
    GET  /v1/jobs/{id}           job status
    GET  /v1/jobs/{id}/result    PNG bytes once done (409 before that)
    GET  /v1/models              available cascades with resolutions/classes

Jobs run FIFO on a single worker thread (generation is compute-bound); the
queue is bounded (429 when full). Results are content-addressed by
hash(model id, mask bytes, seed, guidance), so identical requests reuse the
same output file. The run directory comes from --run-dir or MASKDIFF_RUN_DIR.
"""

from __future__ import annotations

import argparse
import base64
import dataclasses
import hashlib
import os
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import torch
from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel

from . import datapipe
from .denoiser import ConditioningBundle
from .sampler import CascadeSpec, cascade_sample, stage_model

ULID_ALPHABET = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"
DEFAULT_PORT = 8642


def new_ulid() -> str:
    """26-character Crockford-base32 id: 48-bit ms timestamp + 80 random bits."""
    value = (int(time.time() * 1000) & (2**48 - 1)) << 80
    value |= int.from_bytes(os.urandom(10), "big")
    chars = []
    for _ in range(26):
        chars.append(ULID_ALPHABET[value & 31])
        value >>= 5
    return "".join(reversed(chars))


class GenerateRequest(BaseModel):
    model_id: str
    mask_png_base64: str
    seed: int = 0
    guidance: float | None = None
    stages: int | None = None


@dataclass
class GenerationJob:
    id: str
    model_id: str
    mask_bytes: bytes
    seed: int
    guidance: float | None
    stages: int | None
    status: str = "queued"
    result_path: Path | None = None
    error: str | None = None


class GenService:
    """Job queue + model registry; the single synchronization point is the queue."""

    def __init__(
        self,
        run_dir: str | Path,
        queue_bound: int = 16,
        workers: int = 1,
        generate_fn=None,
        autostart: bool = True,
    ):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.run_dir = Path(run_dir)
        if not self.run_dir.exists():
            raise FileNotFoundError(f"run directory {self.run_dir} does not exist")
        self.jobs: dict[str, GenerationJob] = {}
        self.lock = threading.Lock()
        self.queue: queue.Queue[GenerationJob] = queue.Queue(maxsize=queue_bound)
        self.generate_fn = generate_fn or self._generate
        self._specs: dict[str, CascadeSpec] = {}
        self.class_names = self._load_class_names()
        self.workers = [threading.Thread(target=self._worker_loop, daemon=True) for _ in range(workers)]
        if autostart:
            for worker in self.workers:
                worker.start()

    # -- model registry

    def _load_class_names(self) -> list[str]:
        manifest_path = self.run_dir / "manifests" / "real.json"
        if manifest_path.exists():
            return datapipe.Manifest.load(manifest_path).class_names
        return []

    def model_ids(self) -> list[str]:
        return sorted(p.stem for p in (self.run_dir / "cascades").glob("*.json"))

    def spec_for(self, model_id: str) -> CascadeSpec:
        if model_id not in self._specs:
            path = self.run_dir / "cascades" / f"{model_id}.json"
            if not path.exists():
                raise KeyError(model_id)
            self._specs[model_id] = CascadeSpec.from_json(path)
        return self._specs[model_id]

    def list_models(self) -> list[dict]:
        out = []
        for model_id in self.model_ids():
            spec = self.spec_for(model_id)
            num_classes = stage_model(spec.stages[0]).config.num_classes
            out.append(
                {
                    "id": model_id,
                    "resolutions": [s.resolution for s in spec.stages],
                    "final_resolution": spec.final_resolution,
                    "num_classes": num_classes,
                    "class_names": self.class_names[:num_classes] or [f"class{i}" for i in range(num_classes)],
                }
            )
        return out

    # -- job lifecycle

    def submit(self, req: GenerateRequest) -> GenerationJob:
        try:
            spec = self.spec_for(req.model_id)
        except KeyError:
            raise HTTPException(404, f"unknown model {req.model_id!r}")
        try:
            mask_bytes = base64.b64decode(req.mask_png_base64, validate=True)
            mask = datapipe.decode_mask_bytes(mask_bytes)
        except HTTPException:
            raise
        except Exception as exc:
            raise HTTPException(400, f"malformed mask PNG: {exc}")
        num_classes = stage_model(spec.stages[0]).config.num_classes
        top = int(mask.max(initial=0))
        if top >= num_classes:
            raise HTTPException(400, f"mask contains class index {top} but model has {num_classes} classes")
        if req.stages is not None and not 1 <= req.stages <= len(spec.stages):
            raise HTTPException(400, f"stages must be in [1, {len(spec.stages)}]")
        final_res = spec.final_resolution if req.stages is None else spec.stages[req.stages - 1].resolution
        if mask.shape[0] < final_res or mask.shape[0] % final_res or mask.shape[0] != mask.shape[1]:
            raise HTTPException(
                400, f"mask must be square at the model resolution {final_res} (or an integer multiple)"
            )
        job = GenerationJob(
            id=new_ulid(),
            model_id=req.model_id,
            mask_bytes=mask_bytes,
            seed=req.seed,
            guidance=req.guidance,
            stages=req.stages,
        )
        try:
            self.queue.put_nowait(job)
        except queue.Full:
            raise HTTPException(429, "generation queue is full; retry later")
        with self.lock:
            self.jobs[job.id] = job
        return job

    def _worker_loop(self) -> None:
        while True:
            job = self.queue.get()
            job.status = "running"
            try:
                job.result_path = self.generate_fn(job)
                job.status = "done"
            except Exception as exc:  # noqa: BLE001 - job boundary
                job.error = str(exc)
                job.status = "failed"

    def _generate(self, job: GenerationJob) -> Path:
        spec = self.spec_for(job.model_id)
        if job.stages is not None:
            spec = CascadeSpec(stages=spec.stages[: job.stages])
        if job.guidance is not None:
            spec = CascadeSpec(stages=[dataclasses.replace(s, guidance_weight=job.guidance) for s in spec.stages])
        digest = hashlib.sha256()
        digest.update(job.model_id.encode())
        digest.update(job.mask_bytes)
        digest.update(str(job.seed).encode())
        digest.update(str(job.guidance).encode())
        digest.update(str(job.stages).encode())
        out_path = self.run_dir / "service_results" / f"{digest.hexdigest()[:32]}.png"
        if out_path.exists():
            return out_path
        num_classes = stage_model(spec.stages[0]).config.num_classes
        mask = datapipe.decode_mask_bytes(job.mask_bytes)
        onehot = torch.from_numpy(datapipe.mask_to_onehot(mask, num_classes))[None]
        image = cascade_sample(spec, ConditioningBundle(mask=onehot), seed=job.seed)
        # write-then-rename so concurrent workers computing the same digest never tear the file
        tmp_path = out_path.with_name(f".{job.id}.tmp.png")
        datapipe.save_image(tmp_path, image[0].permute(1, 2, 0).numpy())
        os.replace(tmp_path, out_path)
        return out_path


def create_app(run_dir: str | Path | None = None, **service_kwargs) -> FastAPI:
    run_dir = run_dir or os.environ.get("MASKDIFF_RUN_DIR")
    if not run_dir:
        raise ValueError("run directory required: pass run_dir or set MASKDIFF_RUN_DIR")
    service = GenService(run_dir, **service_kwargs)
    app = FastAPI(title="maskdiff genservice")
    app.state.service = service

    @app.post("/v1/generate", status_code=202)
    def generate(req: GenerateRequest):
        job = service.submit(req)
        return {"job_id": job.id}

    @app.get("/v1/jobs/{job_id}")
    def job_status(job_id: str):
        job = service.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id!r}")
        body = {"id": job.id, "status": job.status, "model_id": job.model_id, "seed": job.seed}
        if job.error:
            body["error"] = job.error
        return body

    @app.get("/v1/jobs/{job_id}/result")
    def job_result(job_id: str):
        job = service.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id!r}")
        if job.status != "done":
            raise HTTPException(409, f"job {job_id} is {job.status}, not done")
        return Response(content=job.result_path.read_bytes(), media_type="image/png")

    @app.get("/v1/models")
    def models():
        return {"models": service.list_models()}

    return app


def main(argv: list[str] | None = None) -> int:
    import uvicorn

    parser = argparse.ArgumentParser(prog="maskdiff-genservice", description=__doc__)
    parser.add_argument("--run-dir", default=None, help="run directory (default: MASKDIFF_RUN_DIR)")
    parser.add_argument("--port", type=int, default=DEFAULT_PORT)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--queue-bound", type=int, default=16)
    parser.add_argument("--workers", type=int, default=1, help="concurrent generation workers")
    args = parser.parse_args(argv)
    app = create_app(args.run_dir, queue_bound=args.queue_bound, workers=args.workers)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
