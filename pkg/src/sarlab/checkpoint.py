"""Byte-stable artifact files: parameter checkpoints, embedding matrices and
line-delimited record logs.

Checkpoints are zip containers holding one ``.npy`` member per tensor plus a
``meta.json`` member (format version, tensor names and shapes, free-form
metadata).  Member timestamps are pinned so equal tensors give equal bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CHECKPOINT_VERSION = 1
EMBEDDING_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class ArtifactError(ValueError):
    """A missing, corrupt or incompatible artifact file."""


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    names = sorted(tensors)
    header = {"version": CHECKPOINT_VERSION,
              "tensors": [{"name": n, "shape": list(np.shape(tensors[n]))} for n in names],
              "meta": dict(meta or {})}
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_member("meta.json"), json.dumps(header, sort_keys=True, indent=1))
        for n in names:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(tensors[n], dtype=np.float64),
                                      allow_pickle=False)
            zf.writestr(_member(f"{n}.npy"), buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"checkpoint {path} not found")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("meta.json"))
            if header.get("version") != CHECKPOINT_VERSION:
                raise ArtifactError(f"checkpoint {path} has unsupported version "
                                    f"{header.get('version')!r}")
            tensors = {}
            for entry in header["tensors"]:
                arr = np.lib.format.read_array(io.BytesIO(zf.read(entry["name"] + ".npy")),
                                               allow_pickle=False)
                if list(arr.shape) != entry["shape"]:
                    raise ArtifactError(f"tensor {entry['name']} has shape {arr.shape}, "
                                        f"header says {entry['shape']}")
                tensors[entry["name"]] = arr
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ArtifactError(f"checkpoint {path} is corrupt: {exc}") from exc
    return tensors, header["meta"]


def prefixed(prefix: str, state: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in state.items()}


def unprefixed(prefix: str, state: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}


def save_embeddings(path, article_ids: Sequence[str], matrix: np.ndarray) -> None:
    """Text matrix: a JSON header line (version, dim, id order) then one
    ``id<TAB>values`` row per article with round-trip float formatting."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[0] != len(article_ids):
        raise ValueError(f"{matrix.shape[0]} rows for {len(article_ids)} article ids")
    header = {"version": EMBEDDING_VERSION, "dim": int(matrix.shape[1]), "ids": list(article_ids)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for aid, row in zip(article_ids, matrix):
            fh.write(aid + "\t" + " ".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"embedding file {path} not found")
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("version") != EMBEDDING_VERSION:
            raise ArtifactError(f"embedding file {path} has unsupported version")
        ids, rows = [], []
        for line in fh:
            aid, values = line.rstrip("\n").split("\t")
            ids.append(aid)
            rows.append([float(v) for v in values.split()])
    if ids != header["ids"]:
        raise ArtifactError(f"embedding rows in {path} do not follow the header id order")
    matrix = np.array(rows, dtype=np.float64).reshape(len(ids), header["dim"])
    return ids, matrix


def write_records(path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
