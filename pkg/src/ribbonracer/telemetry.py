"""Telemetry container: the time-series currency passed between modules.

A run produces one Telemetry per lap (or maneuver): road-relative pose,
body velocities, specific-force accelerations, driver commands and sector
index, sampled on the control loop clock. Everything downstream (model fitting,
envelope learning, lap-time comparison) consumes this type, so the column
set and the CSV layout are pinned here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import TrackFormatError

#: canonical column order for CSV export; extras are appended after these
CORE_COLUMNS = ["t", "zeta", "n", "xi", "v_x", "v_y", "omega_z",
                "a_x", "a_y", "a_z", "steering", "throttle", "brake",
                "mu", "phi", "sector"]


@dataclass
class Telemetry:
    """Uniformly sampled run log plus lap/sector results."""

    data: pd.DataFrame
    lap_time: float | None = None
    sector_times: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [c for c in CORE_COLUMNS if c not in self.data.columns]
        if missing:
            raise TrackFormatError(f"telemetry is missing columns: {missing}")

    def __len__(self):
        return len(self.data)

    def __getitem__(self, column) -> np.ndarray:
        return self.data[column].to_numpy()

    @property
    def dt(self) -> float:
        t = self.data["t"].to_numpy()
        return float(np.median(np.diff(t)))

    @classmethod
    def from_arrays(cls, columns: dict, **kwargs) -> "Telemetry":
        lengths = {k: len(v) for k, v in columns.items()}
        if len(set(lengths.values())) > 1:
            raise TrackFormatError(f"telemetry columns differ in length: {lengths}")
        order = [c for c in CORE_COLUMNS if c in columns]
        order += [c for c in columns if c not in CORE_COLUMNS]
        frame = pd.DataFrame({k: np.asarray(columns[k]) for k in order})
        return cls(frame, **kwargs)

    def window(self, t0: float, t1: float) -> "Telemetry":
        """Rows with t0 <= t < t1 (lap/sector metadata is not carried over)."""
        t = self.data["t"]
        return Telemetry(self.data[(t >= t0) & (t < t1)].reset_index(drop=True),
                         meta=dict(self.meta))

    def rate_derivatives(self, column: str) -> np.ndarray:
        """d(column)/dt by central differences (one-sided at the ends)."""
        y = self.data[column].to_numpy(dtype=float)
        t = self.data["t"].to_numpy(dtype=float)
        return np.gradient(y, t)

    # -- persistence ----------------------------------------------------------

    def save_csv(self, path) -> Path:
        path = Path(path)
        if path.suffix != ".csv":
            path = path.with_suffix(".csv")
        self.data.to_csv(path, index=False)
        sidecar = {"lap_time": self.lap_time,
                   "sector_times": list(self.sector_times),
                   "meta": self.meta}
        path.with_name(path.stem + ".meta.json").write_text(
            json.dumps(sidecar, indent=2) + "\n")
        return path

    @classmethod
    def load_csv(cls, path) -> "Telemetry":
        path = Path(path)
        if not path.exists():
            raise TrackFormatError(f"telemetry file not found: {path}")
        frame = pd.read_csv(path)
        meta_path = path.with_name(path.stem + ".meta.json")
        lap_time, sectors, meta = None, [], {}
        if meta_path.exists():
            sidecar = json.loads(meta_path.read_text())
            lap_time = sidecar.get("lap_time")
            sectors = sidecar.get("sector_times", [])
            meta = sidecar.get("meta", {})
        return cls(frame, lap_time=lap_time, sector_times=sectors, meta=meta)


def concat(parts) -> Telemetry:
    """Stack several telemetries into one (for fitting on accumulated data).

    Time columns are kept as recorded; fitters treat rows independently, and
    anything rate-based should be computed per part before concatenation.
    """
    parts = list(parts)
    if not parts:
        raise TrackFormatError("cannot concatenate zero telemetries")
    frame = pd.concat([p.data for p in parts], ignore_index=True)
    return Telemetry(frame, meta={"parts": len(parts)})
