"""Checkpoint files.

Layout: a text header (magic line, ``format_version``, the model config as
``key = value`` lines, free-form ``meta.*`` entries, ``end_header``), then
one record per parameter: a line ``name shape=d1,d2`` followed by the raw
little-endian float64 buffer. Loading checks every name and shape against
the config in the header.
"""

import numpy as np

from .config import format_key_values, parse_key_values
from .errors import CheckpointError, ConfigError, ParseError
from .vit import ModelWeights, TransformerConfig

MAGIC = b"VITDEIT-CHECKPOINT\n"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def save_checkpoint(path, weights, metadata=None):
    header = {"format_version": FORMAT_VERSION}
    header.update(weights.config.to_dict())
    for key, value in (metadata or {}).items():
        header[f"meta.{key}"] = value
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(format_key_values(header).encode("utf-8"))
        fh.write(b"end_header\n")
        for name, arr in weights.items():
            shape = ",".join(str(n) for n in arr.shape)
            fh.write(f"{name} shape={shape}\n".encode("utf-8"))
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes())
    return path


def read_checkpoint(path):
    """Return (config, weights, metadata)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        lines = []
        while True:
            line = fh.readline()
            if not line:
                raise CheckpointError(f"{path}: truncated header")
            if line == b"end_header\n":
                break
            lines.append(line.decode("utf-8"))
        try:
            header = parse_key_values("".join(lines))
        except ParseError as exc:
            raise CheckpointError(f"{path}: bad header: {exc}") from exc
        version = header.pop("format_version", None)
        if version != str(FORMAT_VERSION):
            raise CheckpointError(f"{path}: unsupported format version {version!r}")
        metadata = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
        try:
            config = TransformerConfig.from_dict({k: v for k, v in header.items() if not k.startswith("meta.")})
        except ConfigError as exc:
            raise CheckpointError(f"{path}: bad config: {exc}") from exc
        expected = config.param_shapes()
        params = {}
        for name, shape in expected.items():
            line = fh.readline().decode("utf-8").rstrip("\n")
            try:
                got_name, shape_field = line.split(" ")
                got_shape = tuple(int(n) for n in shape_field.removeprefix("shape=").split(","))
            except ValueError:
                raise CheckpointError(f"{path}: malformed record header {line!r}") from None
            if got_name != name or got_shape != shape:
                raise CheckpointError(
                    f"{path}: expected {name} with shape {shape}, found {got_name} with shape {got_shape}")
            count = int(np.prod(shape))
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"{path}: truncated data for {name}")
            params[name] = np.frombuffer(buf, dtype=_LE_F64).astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing data after last parameter")
    return config, ModelWeights(config, params), metadata


def load_checkpoint(path):
    config, weights, _ = read_checkpoint(path)
    return config, weights
