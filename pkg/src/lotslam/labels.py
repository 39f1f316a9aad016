"""Marker class labels shared by the simulator, feature extractor, and map."""

from __future__ import annotations

BACKGROUND = 0

LABEL_CODES = {
    "lane_line": 1,
    "parking_line": 2,
    "arrow": 3,
    "stop_line": 4,
    "zebra": 5,
}

LABEL_NAMES = {v: k for k, v in LABEL_CODES.items()}


def label_code(name: str) -> int:
    try:
        return LABEL_CODES[name]
    except KeyError:
        raise ValueError(f"unknown marker label: {name!r}") from None


def label_name(code: int) -> str:
    try:
        return LABEL_NAMES[int(code)]
    except KeyError:
        raise ValueError(f"unknown marker label code: {code}") from None
