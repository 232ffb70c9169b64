# funcount/outputs.py

import hashlib
import os
import tempfile
from pathlib import Path
from typing import Union

import pandas as pd

FLOAT_FORMAT = "%.10g"


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    """
    Write text to `path` through a temp file in the same directory followed
    by os.replace, so readers never observe a partially written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    # Fixed float format keeps reruns byte-identical.
    text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return atomic_write_text(path, text)


def file_digest(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
