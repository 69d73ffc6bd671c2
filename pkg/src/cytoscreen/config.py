"""Flat key=value settings file for pipeline thresholds.

One `key = value` pair per line; `#` starts a comment. Values coerce to
int, then float, then bool, then stay strings.
"""
from __future__ import annotations

from pathlib import Path

DEFAULTS = {
    "stride": 50,
    "confidence": 0.2,
    "min_overlap": 0.25,
    "flow_threshold": 0.5,
    "cellprob_threshold": 0.0,
    "min_mask_pixels": 15,
    "variant": "original13",
    "input_resolution": 224,
}


def coerce(raw: str):
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def parse_settings(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        out[key] = coerce(raw)
    return out


def load_settings(path=None) -> dict:
    """DEFAULTS overlaid with the file's pairs; unknown keys pass through."""
    merged = dict(DEFAULTS)
    if path is not None:
        merged.update(parse_settings(Path(path).read_text()))
    return merged
