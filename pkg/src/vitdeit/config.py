"""Key-value text files and seed derivation shared by trainer and CLI."""

import hashlib

from .errors import ParseError


def parse_key_values(text):
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ParseError("empty key", line=lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", line=lineno)
        values[key] = value
    return values


def read_key_values(path):
    with open(path, encoding="utf-8") as fh:
        return parse_key_values(fh.read())


def format_key_values(values):
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def derive_seed(seed, stage):
    """Stable 32-bit sub-seed for a named pipeline stage."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")
