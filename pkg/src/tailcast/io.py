"""Flat key=value config files, CSV emission, and run manifests.

All outputs are deterministic: given the same config and seed, re-running
a command rewrites byte-identical files (no timestamps, no environment
captures).
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["read_config", "write_config", "write_csv", "write_manifest", "format_value"]


def read_config(path) -> dict:
    """Flat key=value lines; '#' comments and blanks ignored."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_config(path, config: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(config):
            fh.write(f"{key}={format_value(config[key])}\n")


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    """Minimal deterministic CSV: repr() floats, no quoting needed."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_value(v) for v in row) + "\n")


def write_manifest(out_dir, command: str, config: dict, outputs) -> str:
    """Record what a command produced; returns the manifest path."""
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"command={command}\n")
        for key in sorted(config):
            fh.write(f"config.{key}={format_value(config[key])}\n")
        for name in outputs:
            fh.write(f"output={name}\n")
    return path
