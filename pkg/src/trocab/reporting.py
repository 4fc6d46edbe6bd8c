"""JSON report schema and plain-text table rendering for CLI output."""

from __future__ import annotations

import json

import jsonschema

SCHEMA_VERSION = 1

COMMANDS = ("gen-data", "train", "eval", "attack", "bench", "calibrate", "adapt-sim")

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "command", "seed", "results"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "command": {"enum": list(COMMANDS)},
        "seed": {"type": "integer"},
        "config": {"type": "string"},
        "results": {"type": "object"},
        "timing": {
            "type": "object",
            "properties": {"wall_time_s": {"type": "number"}},
            "additionalProperties": False,
        },
    },
}


def build_report(command: str, seed: int, config_text: str, results: dict,
                 wall_time_s: float | None = None) -> dict:
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "config": config_text,
        "results": results,
    }
    if wall_time_s is not None:
        report["timing"] = {"wall_time_s": wall_time_s}
    validate_report(report)
    return report


def validate_report(report: dict) -> None:
    jsonschema.validate(report, REPORT_SCHEMA)


def write_report(path, report: dict) -> None:
    validate_report(report)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def render_table(headers: list[str], rows: list[list], floatfmt: str = "{:.4f}") -> str:
    """Aligned-column text table; floats formatted, everything else str()."""

    def fmt(cell):
        if isinstance(cell, bool):
            return "yes" if cell else "no"
        if isinstance(cell, float):
            return floatfmt.format(cell)
        return str(cell)

    cells = [[fmt(c) for c in row] for row in rows]
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in cells)) if cells else len(headers[i])
        for i in range(len(headers))
    ]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    for r in cells:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines)
