"""JSON schemas for the manifest, the command envelope and the report payloads."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

NAMES = ("envelope", "manifest", "eval_report", "experiment")


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in NAMES:
        raise KeyError(f"unknown schema {name!r}; expected one of {NAMES}")
    return json.loads(resources.files(__name__).joinpath(f"{name}.schema.json").read_text())


def validate(doc, name: str) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not match schema ``name``."""
    import jsonschema

    jsonschema.validate(doc, load_schema(name))
