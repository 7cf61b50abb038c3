"""Reading and writing the JSON and CSV files we exchange with users.

Every JSON document has a schema in ``expertbits/schemas``, and is checked
against it on the way out and on the way in.
"""

import csv
import functools
import io
import json
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import jsonschema

from expertbits.errors import FileAccessError, ManifestError, MissingFileError, SchemaError
from expertbits.utils import atomic_write_text

SCHEMA_VERSION = 1

SCHEMAS = (
    "manifest",
    "metrics",
    "plan",
    "quant_report",
    "lemma1_report",
    "surrogate",
    "run_config",
)


@functools.cache
def load_schema(name: str) -> dict:
    if name not in SCHEMAS:
        raise KeyError(f"no schema named {name!r}")
    text = resources.files("expertbits").joinpath(f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


def validate(payload: Any, schema: str) -> None:
    try:
        jsonschema.validate(payload, load_schema(schema))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "(top)"
        raise SchemaError(f"{schema} document invalid at {where}: {exc.message}") from None


def dumps(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: str | Path, payload: dict, schema: str | None = None) -> None:
    if schema is not None:
        validate(payload, schema)
    atomic_write_text(path, dumps(payload))


def read_json(path: str | Path, schema: str | None = None) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise MissingFileError(f"missing file {path}") from None
    except OSError as exc:
        raise FileAccessError(f"couldn't read {path}: {exc.strerror or exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} isn't valid JSON: {exc}") from None
    if schema is not None:
        validate(payload, schema)
    return payload


def write_csv(path: str | Path, header: list[str], rows: Iterable[Iterable[Any]]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buffer.getvalue())
