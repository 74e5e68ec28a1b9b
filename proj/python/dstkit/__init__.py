"""Dialogue state tracking toolkit: corpus tools, instruction generation and metrics."""

import json

from ._core import (
    DataError,
    RuntimeFailure,
    UsageError,
    __version__,
    cache_key,
    count_lora_params,
    normalize_value,
    run_cli,
)
from . import _core


def synth(**kwargs):
    """Return (schema, dialogues) for a synthetic corpus as parsed JSON."""
    schema, dialogues = _core.synth(**kwargs)
    return json.loads(schema), [json.loads(line) for line in dialogues.splitlines() if line]


def generate_instructions(schema, dialogues, **kwargs):
    text = _core.generate_instructions(json.dumps(schema), _jsonl(dialogues), **kwargs)
    return [json.loads(line) for line in text.splitlines() if line]


def evaluate(schema, gold, predictions, **kwargs):
    return json.loads(_core.evaluate(json.dumps(schema), _jsonl(gold), _jsonl(predictions), **kwargs))


def _jsonl(records):
    if isinstance(records, str):
        return records
    return "".join(json.dumps(r) + "\n" for r in records)


__all__ = [
    "DataError",
    "RuntimeFailure",
    "UsageError",
    "__version__",
    "cache_key",
    "count_lora_params",
    "evaluate",
    "generate_instructions",
    "normalize_value",
    "run_cli",
    "synth",
]
