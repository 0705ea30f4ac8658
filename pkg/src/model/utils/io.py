import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from config import WEIGHTS_FORMAT_VERSION, WEIGHTS_MAGIC
from model.components.autodiff import NonFiniteError, Tensor
from model.network import ModelHparams, ModelParams, build_model_params

_LENGTH = struct.Struct("<I")
_FLOAT = np.dtype("<f8")


class WeightsFileError(ValueError):
    """Raised for unreadable, truncated or inconsistent weights files."""


def save_weights(
    path: str | Path, params: ModelParams, extra: Optional[dict] = None
) -> Path:
    """
    Write parameters to a weights file.

    Layout: 4-byte magic, little-endian u32 header length, JSON header with
    the format version, the hyperparameters, the ordered tensor table
    (name and shape) and free-form `extra` metadata, then the raw
    little-endian float64 data of every tensor in table order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(params.tensors)
    header = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "hparams": params.hparams.to_dict(),
        "tensors": [
            {"name": name, "shape": list(params.tensors[name].shape)} for name in names
        ],
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(_LENGTH.pack(len(header_bytes)))
        f.write(header_bytes)
        for name in names:
            f.write(params.tensors[name].data.astype(_FLOAT).tobytes(order="C"))
    return path


def read_weights_header(path: str | Path) -> dict:
    """Read only the JSON header of a weights file."""
    with open(path, "rb") as f:
        return _read_header(f, Path(path))


def _read_header(f, path: Path) -> dict:
    magic = f.read(len(WEIGHTS_MAGIC))
    if magic != WEIGHTS_MAGIC:
        raise WeightsFileError(f"{path}: not a weights file (bad magic {magic!r}).")
    raw_len = f.read(_LENGTH.size)
    if len(raw_len) != _LENGTH.size:
        raise WeightsFileError(f"{path}: truncated header length.")
    (length,) = _LENGTH.unpack(raw_len)
    raw = f.read(length)
    if len(raw) != length:
        raise WeightsFileError(f"{path}: truncated header.")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightsFileError(f"{path}: unreadable header ({e}).") from e
    if header.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise WeightsFileError(
            f"{path}: unsupported format version {header.get('format_version')}."
        )
    return header


def load_weights(path: str | Path) -> tuple[ModelParams, dict]:
    """
    Read a weights file back into ModelParams.

    Returns:
        tuple: (parameters, the header's `extra` metadata).

    Raises:
        WeightsFileError: If the file is malformed, a tensor is missing,
            duplicated, misshapen or non-finite, or trailing bytes remain.
    """
    path = Path(path)
    with open(path, "rb") as f:
        header = _read_header(f, path)
        try:
            hparams = ModelHparams.from_dict(header["hparams"])
        except (KeyError, TypeError, ValueError) as e:
            raise WeightsFileError(f"{path}: invalid hyperparameters ({e}).") from e
        expected = {
            name: t.shape for name, t in build_model_params(hparams).tensors.items()
        }

        table = header.get("tensors", [])
        names = [entry["name"] for entry in table]
        if len(set(names)) != len(names):
            raise WeightsFileError(f"{path}: duplicated tensor names.")
        if set(names) != set(expected):
            diff = sorted(set(names) ^ set(expected))
            raise WeightsFileError(f"{path}: tensor set does not match model: {diff}.")

        tensors = {}
        for entry in table:
            name, shape = entry["name"], tuple(entry["shape"])
            if shape != expected[name]:
                raise WeightsFileError(
                    f"{path}: tensor '{name}' has shape {shape}, "
                    f"expected {expected[name]}."
                )
            count = int(np.prod(shape))
            raw = f.read(count * _FLOAT.itemsize)
            if len(raw) != count * _FLOAT.itemsize:
                raise WeightsFileError(f"{path}: truncated data for '{name}'.")
            try:
                tensors[name] = Tensor(
                    np.frombuffer(raw, dtype=_FLOAT).reshape(shape), name=name
                )
            except NonFiniteError as e:
                raise WeightsFileError(f"{path}: {e}") from e
        if f.read(1):
            raise WeightsFileError(f"{path}: unexpected trailing bytes.")
    return ModelParams(hparams=hparams, tensors=tensors), header.get("extra", {})
