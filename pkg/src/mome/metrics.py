"""Append-only JSON-lines metrics."""
import json
import math
import sys


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if hasattr(v, "item"):
        return _clean(v.item())
    return v


def format_record(kind, config_hash=None, **fields):
    rec = {"kind": kind, "config_hash": config_hash}
    rec.update({k: _clean(v) for k, v in fields.items()})
    return json.dumps(rec, sort_keys=True)


class MetricsWriter:
    """One JSON object per line; opened in append mode and flushed per record."""

    def __init__(self, path=None, config_hash=None, stream=None):
        self.config_hash = config_hash
        self._fh = open(path, "a", encoding="utf-8") if path else None
        self._stream = stream

    def write(self, kind, **fields):
        line = format_record(kind, self.config_hash, **fields)
        for out in (self._fh, self._stream):
            if out is not None:
                out.write(line + "\n")
                out.flush()
        return line

    def step(self, record):
        return self.write("step", **record)

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def stdout_writer(config_hash=None):
    return MetricsWriter(None, config_hash, sys.stdout)
