"""Converter entry point for FRED recordings into the canonical formats.

FRED ships HD (1280x720) event recordings with per-frame drone boxes and
track ids. Its on-disk event container has not been verified against this
package, so :func:`convert_fred_sequence` only fixes the interface: given a
sequence directory it must write ``events.bin`` (canonical binary) and
``annotations.csv`` (``t_us,track_id,x_min,y_min,w,h``) into ``out_dir``.
"""

from __future__ import annotations

from pathlib import Path

from .events import SensorGeometry

FRED_GEOMETRY = SensorGeometry(1280, 720)


def convert_fred_sequence(sequence_dir: str | Path, out_dir: str | Path) -> tuple[Path, Path]:
    """Convert one FRED sequence; returns ``(events_path, annotations_path)``.

    Not implemented until the native layout can be checked against real files.
    """
    raise NotImplementedError(
        "FRED native decoding is not available; convert the sequence to the canonical "
        "event binary/CSV and annotation CSV formats and pass those files instead"
    )
