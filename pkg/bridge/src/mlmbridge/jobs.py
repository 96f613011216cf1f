"""Fine-tune job tracking: at most one active job, run on a model copy in a
background thread so scoring stays available."""

from __future__ import annotations

import itertools
import tempfile
import threading
from dataclasses import dataclass, field


class JobNotFound(Exception):
    pass


class FinetuneBusy(Exception):
    pass


@dataclass
class JobStatus:
    job_id: str
    state: str = "queued"            # queued | running | done | failed
    steps_done: int = 0
    total_steps: int = 0
    loss_last: float | None = None
    output_dir: str | None = None
    error: str | None = None

    def as_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "state": self.state,
            "steps_done": self.steps_done,
            "total_steps": self.total_steps,
            "loss_last": self.loss_last,
            "output_dir": self.output_dir,
            "error": self.error,
        }


@dataclass
class JobRegistry:
    work_dir: str | None = None
    _jobs: dict[str, JobStatus] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock)
    _counter: itertools.count = field(default_factory=lambda: itertools.count(1))

    def _active(self) -> JobStatus | None:
        return next((j for j in self._jobs.values()
                     if j.state in ("queued", "running")), None)

    def start(self, backend, sentences, config) -> JobStatus:
        with self._lock:
            active = self._active()
            if active is not None:
                raise FinetuneBusy(f"job {active.job_id} is {active.state}")
            job = JobStatus(job_id=f"job-{next(self._counter)}")
            self._jobs[job.job_id] = job

        output_dir = tempfile.mkdtemp(prefix=f"mlmbridge-{job.job_id}-",
                                      dir=self.work_dir)

        def progress(step: int, total: int, loss: float) -> None:
            job.steps_done = step
            job.total_steps = total
            if loss == loss:  # skip nan no-op steps
                job.loss_last = loss

        def run() -> None:
            job.state = "running"
            try:
                result_dir = backend.finetune(sentences, config, output_dir,
                                              progress=progress)
                job.output_dir = str(result_dir)
                job.state = "done"
            except Exception as e:  # noqa: BLE001 - surfaced via status
                job.error = f"{type(e).__name__}: {e}"
                job.state = "failed"

        threading.Thread(target=run, daemon=True).start()
        return job

    def status(self, job_id: str) -> JobStatus:
        try:
            return self._jobs[job_id]
        except KeyError:
            raise JobNotFound(job_id) from None
