"""Single-file checkpoint archive: JSON metadata plus named ``.npy`` arrays.

The archive is a zip with fixed member timestamps and sorted, canonical JSON,
so writing the same content twice produces identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT = "ascnet-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_archive(path: Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta, format=FORMAT, version=VERSION, arrays=sorted(arrays))
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_member("meta.json"), json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_member(f"arrays/{name}.npy"), buf.getvalue())
    tmp.replace(path)


def read_archive(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(Path(path)) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT:
            raise ValueError(f"{path}: not an {FORMAT} archive")
        if meta.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        arrays = {}
        for name in meta["arrays"]:
            with zf.open(f"arrays/{name}.npy") as fh:
                arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    return meta, arrays
