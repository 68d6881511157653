"""Python bindings for the dtune core library."""

import json as _json

from ._dtune import (
    CorruptionError,
    Error,
    ValidationError,
    __version__,
    layer_score,
    load_checkpoint as _load_checkpoint,
    render,
    run_cli,
    steps_to_threshold,
    templates,
)
from . import _dtune

__all__ = [
    "CorruptionError",
    "Error",
    "ValidationError",
    "config_hash",
    "default_config",
    "identity",
    "importance_report",
    "layer_score",
    "load_checkpoint",
    "render",
    "run_cli",
    "steps_to_threshold",
    "templates",
    "validate_config",
]


def default_config():
    return _json.loads(_dtune.default_config_json())


def validate_config(cfg):
    """Overlays `cfg` on the defaults; raises ValidationError with the key path."""
    return _json.loads(_dtune.validate_config_json(_json.dumps(cfg)))


def config_hash(cfg):
    return _dtune.config_hash_json(_json.dumps(cfg))


def identity(seed):
    return _json.loads(_dtune.identity_json(seed))


def importance_report(base, tuned):
    """`base` and each entry of `tuned` map tensor names to arrays."""
    return _json.loads(_dtune.importance_report_json(base, list(tuned)))


def load_checkpoint(path):
    config, extra, tensors = _load_checkpoint(str(path))
    return {"config": _json.loads(config), "extra": _json.loads(extra), "tensors": tensors}
