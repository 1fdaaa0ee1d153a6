"""Attribution files and flat report tables."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

ATTRIBUTION_FORMAT_VERSION = 1


@dataclass
class AttributionRecord:
    journey_id: str
    user_id: str
    weights: list[float]
    method: str
    conversion: float | None = None
    click_prob: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "format_version": ATTRIBUTION_FORMAT_VERSION,
            "method": self.method,
            "journey_id": self.journey_id,
            "user_id": self.user_id,
            "weights": self.weights,
        }
        if self.conversion is not None:
            d["conversion"] = self.conversion
        if self.click_prob:
            d["click_prob"] = self.click_prob
        return d


def write_attributions(path, records: Iterable[AttributionRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), separators=(",", ":")) + "\n")


def read_attributions(path) -> list[AttributionRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("format_version") != ATTRIBUTION_FORMAT_VERSION:
                raise ValueError(f"unsupported attribution format_version {d.get('format_version')!r}")
            out.append(
                AttributionRecord(
                    str(d["journey_id"]),
                    str(d["user_id"]),
                    [float(x) for x in d["weights"]],
                    str(d["method"]),
                    d.get("conversion"),
                    [float(x) for x in d.get("click_prob", [])],
                )
            )
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
