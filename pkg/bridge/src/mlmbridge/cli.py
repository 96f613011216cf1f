"""Serve a pretrained masked-LM checkpoint over the bridge protocol."""

from __future__ import annotations

import sys

import click

from .backend import HfMlmBackend, ModelLoadFailure
from .jobs import JobRegistry
from .service import create_app


@click.group()
def main() -> None:
    """Masked-LM bridge service."""


@main.command()
@click.option("--model", required=True,
              help="Checkpoint name or local path (e.g. bert-base-uncased, "
                   "dbmdz/bert-base-german-cased, or a directory).")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8756, show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--work-dir", default=None,
              help="Directory for fine-tune job outputs (default: tmp).")
def serve(model, host, port, device, seed, work_dir):
    """Load a checkpoint and answer protocol requests."""
    import uvicorn

    try:
        backend = HfMlmBackend(model, device=device, seed=seed)
    except ModelLoadFailure as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    app = create_app(backend, JobRegistry(work_dir=work_dir))
    click.echo(f"serving {model} on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
