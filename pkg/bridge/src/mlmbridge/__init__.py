"""HTTP bridge exposing pretrained masked language models to the mlmbias
pipeline over the protocol documented in PROTOCOL.md."""

from .backend import HfMlmBackend, ModelLoadFailure
from .jobs import FinetuneBusy, JobNotFound, JobRegistry, JobStatus
from .service import PROTOCOL_NAME, create_app

__version__ = "0.1.0"
