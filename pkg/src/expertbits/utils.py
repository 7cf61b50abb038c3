import contextlib
import os
import tempfile
from pathlib import Path
from typing import Iterator

import numpy as np

from expertbits.errors import FileAccessError, InvalidArgumentError, NonFiniteError


@contextlib.contextmanager
def in_tempdir() -> Iterator[str]:
    """Make a temp directory and cd into it, then come back and delete it."""
    with tempfile.TemporaryDirectory() as tmpdir:
        with contextlib.chdir(tmpdir):
            yield tmpdir


def plural(n: int, thing: str = "", things: str = "") -> str:
    """Pluralize a word.

    If n is 1, return thing.  Otherwise return things, or thing+s.
    """
    if n == 1:
        noun = thing
    else:
        noun = things or (thing + "s")
    return f"{n} {noun}"


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write `data` to `path` so that readers never see a partial file.

    The data goes to a temporary file in the same directory, which is then
    renamed over the destination.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmpname = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise FileAccessError(f"couldn't write {path}: {exc.strerror or exc}") from exc
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmpname, path)
    except BaseException as exc:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmpname)
        if isinstance(exc, OSError):
            raise FileAccessError(f"couldn't write {path}: {exc.strerror or exc}") from exc
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def parse_list(text: str, convert=float) -> list:
    """Parse a comma-separated command-line value like "3,2,1"."""
    try:
        return [convert(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise InvalidArgumentError(f"Couldn't parse list {text!r}") from None


def as_finite_array(values, what: str = "tensor") -> np.ndarray:
    """Convert to a float64 array, rejecting NaN and infinity."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return arr
