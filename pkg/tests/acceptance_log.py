"""Collects one pass/fail line per acceptance criterion for the end-of-run summary."""

from __future__ import annotations

RESULTS: dict[int, str] = {}


def record(number: int, title: str, ok: bool, detail: str, elapsed: float, limit: float) -> str:
    timing_ok = elapsed < limit
    verdict = "PASS" if ok and timing_ok else "FAIL"
    line = f"criterion {number:2d} {verdict}: {title} | {detail} | {elapsed:.2f}s (limit {limit:g}s)"
    RESULTS[number] = line
    print(line)
    return line
