"""
InclusionSentinel Backend Server

- Triggers classification experiments in the background.
- Serves finished experiment reports by run id.
"""

import json
import uuid
from pathlib import Path
from typing import Optional

import uvicorn
from fastapi import BackgroundTasks, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from inclusions.evaluation import REPORT_FILE, TIMING_FILE, load_report
from inclusions.pipeline import MODEL_KINDS, TASK_PLANS, run_task
from inclusions.shared import default_config, error_payload, write_json

app = FastAPI()

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def runs_root() -> Path:
    return Path(default_config()["runs_dir"])


@app.get("/")
def health_check():
    return {"status": "ok", "service": "InclusionSentinel Backend"}


class TriggerResponse(BaseModel):
    status: str
    message: str
    data: dict = {}


@app.post("/api/run-experiment/{task}", response_model=TriggerResponse)
async def run_experiment(task: str, background_tasks: BackgroundTasks, scale: Optional[float] = None,
                         seed: int = 0, model: Optional[str] = None):
    """
    Runs one experiment in the background; artifacts land in <runs_dir>/<run_id>.
    """
    if task not in TASK_PLANS:
        raise HTTPException(status_code=400, detail=f"Unknown task {task!r}; expected one of {sorted(TASK_PLANS)}")
    if model is not None and model not in MODEL_KINDS:
        raise HTTPException(status_code=400, detail=f"Unknown model {model!r}; expected one of {MODEL_KINDS}")
    if scale is not None and scale <= 0:
        raise HTTPException(status_code=400, detail=f"Scale must be positive, got {scale}")

    run_id = uuid.uuid4()
    out = runs_root() / str(run_id)

    def task_fn():
        print(f"--- Manual Trigger: Experiment {task} (RunID: {run_id}) ---")
        try:
            run_task(task, scale=scale, seed=seed, model=model, out=out, run_id=run_id)
        except Exception as e:
            print(f"Experiment Run Error: {e}")
            write_json(out / "error.json", error_payload(e))
        print("--- Experiment Run Finished ---")

    background_tasks.add_task(task_fn)

    return {
        "status": "success",
        "message": f"Experiment {task} triggered successfully",
        "data": {"run_id": str(run_id), "task": task},
    }


@app.get("/api/reports/{run_id}")
def get_report(run_id: str):
    """Returns report.json (plus timing) of a finished run, or its failure payload."""
    try:
        uuid.UUID(run_id)
    except ValueError:
        raise HTTPException(status_code=404, detail=f"No run {run_id}")
    directory = runs_root() / run_id
    if (directory / REPORT_FILE).exists():
        report = load_report(directory).to_dict()
        timing = directory / TIMING_FILE
        if timing.exists():
            report["timing"] = load_json(timing)
        return {"status": "success", "data": report}
    if (directory / "error.json").exists():
        return {"status": "failed", "data": load_json(directory / "error.json")}
    raise HTTPException(status_code=404, detail=f"No report for run {run_id}")


def load_json(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


if __name__ == "__main__":
    port = default_config()["server_port"]
    print(f"Starting server on port {port}...")
    uvicorn.run(app, host="0.0.0.0", port=port)
