"""Analytical FPGA model: peak throughput, LUT cost fit and SP2 core sizing.

A design point is the tile shape of the two GEMM cores at a clock frequency.
Each MAC lane of the SP2 core costs a fixed number of LUTs, which is fitted
from measured synthesis results shipped in ``data/devices.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path

from .kernel import GemmStats, GemmTile


class CalibrationError(ValueError):
    pass


class InfeasibleDesign(ValueError):
    pass


class UnknownDevice(KeyError):
    pass


@dataclass(frozen=True)
class Device:
    name: str
    lut: int
    dsp: int
    bram36: float
    ff: int
    freq_mhz: float = 100.0
    lut_overhead: float = 0.0
    base_design: dict = field(default_factory=dict, compare=False)
    calibration: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if min(self.lut, self.dsp, self.bram36, self.ff) <= 0:
            raise ValueError(f"device {self.name}: resource counts must be positive")


@dataclass(frozen=True)
class DesignPoint:
    device: str
    bat: int
    blk_in: int
    blk_out_fixed: int
    blk_out_sp2: int
    freq_mhz: float = 100.0

    def __post_init__(self):
        if self.blk_out_fixed < 1:
            raise ValueError("blk_out_fixed must be >= 1")
        if self.bat < 1 or self.blk_in < 1 or self.blk_out_sp2 < 0:
            raise ValueError("invalid tile sizes")

    @property
    def sp2_lanes(self) -> int:
        return self.bat * self.blk_in * self.blk_out_sp2

    @property
    def fixed_lanes(self) -> int:
        return self.bat * self.blk_in * self.blk_out_fixed

    @property
    def pr_sp2(self) -> float:
        return self.blk_out_sp2 / (self.blk_out_fixed + self.blk_out_sp2)

    @property
    def ratio_label(self) -> str:
        r = Fraction(self.blk_out_sp2, self.blk_out_fixed)
        return f"1:{float(r):g}"

    @property
    def tile(self) -> GemmTile:
        return GemmTile(self.bat, self.blk_in, self.blk_out_fixed, self.blk_out_sp2)


@dataclass(frozen=True)
class LutCostModel:
    base_lut: float
    lut_per_sp2_lane: float
    dsp_per_fixed_lane: float
    max_residual: float = 0.0
    max_rel_residual: float = 0.0

    def __post_init__(self):
        if min(self.base_lut, self.lut_per_sp2_lane, self.dsp_per_fixed_lane) < 0:
            raise CalibrationError("cost coefficients must be nonnegative")

    def lut(self, dp: DesignPoint) -> float:
        return self.base_lut + self.lut_per_sp2_lane * dp.sp2_lanes

    def dsp(self, dp: DesignPoint) -> float:
        return self.dsp_per_fixed_lane * dp.fixed_lanes


def peak_throughput(dp: DesignPoint) -> float:
    """Peak GOPS, counting a MAC as two operations."""
    return 2 * dp.bat * dp.blk_in * (dp.blk_out_fixed + dp.blk_out_sp2) * dp.freq_mhz / 1000.0


def speedup(a: DesignPoint, b: DesignPoint) -> Fraction:
    """Exact ratio of peak throughputs ``a / b``."""
    num = Fraction(a.bat * a.blk_in * (a.blk_out_fixed + a.blk_out_sp2)) * Fraction(a.freq_mhz)
    den = Fraction(b.bat * b.blk_in * (b.blk_out_fixed + b.blk_out_sp2)) * Fraction(b.freq_mhz)
    return num / den


def calibrate_lut_model(points) -> LutCostModel:
    """Least-squares fit ``LUT = base + c * Bat * Blk_in * Blk_out_sp2``.

    ``points`` is a sequence of ``(DesignPoint, measured_lut)`` or
    ``(DesignPoint, measured_lut, measured_dsp)``. The fit runs in exact
    rational arithmetic, so collinear measurements give a residual of exactly 0.
    The DSP coefficient is the through-origin fit of DSP count on fixed lanes.
    """
    points = list(points)
    if len(points) < 2:
        raise CalibrationError("need at least two calibration points")
    xs = [Fraction(p[0].sp2_lanes) for p in points]
    ys = [Fraction(p[1]).limit_denominator(10**6) for p in points]
    n = len(points)
    mx, my = sum(xs) / n, sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    if sxx == 0:
        raise CalibrationError("calibration points do not vary in SP2 lanes")
    slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sxx
    base = my - slope * mx
    residuals = [abs(y - (base + slope * x)) for x, y in zip(xs, ys)]
    rel = [r / y for r, y in zip(residuals, ys) if y]

    with_dsp = [p for p in points if len(p) > 2]
    if with_dsp:
        fl = [Fraction(p[0].fixed_lanes) for p in with_dsp]
        dsp = [Fraction(p[2]).limit_denominator(10**6) for p in with_dsp]
        dsp_coef = sum(f * d for f, d in zip(fl, dsp)) / sum(f * f for f in fl)
    else:
        dsp_coef = Fraction(0)
    return LutCostModel(
        base_lut=float(base),
        lut_per_sp2_lane=float(slope),
        dsp_per_fixed_lane=float(dsp_coef),
        max_residual=float(max(residuals)),
        max_rel_residual=float(max(rel, default=0)),
    )


def select_ratio(
    device: Device,
    base: DesignPoint,
    cost: LutCostModel,
    lut_cap: float = 0.7,
    step: int = 8,
    max_blk_out_sp2: int = 4096,
) -> DesignPoint:
    """Grow the SP2 core in steps of ``step`` while predicted LUTs stay under the cap.

    Predicted LUTs are ``cost.lut(dp) + device.lut_overhead``. The fixed core
    (and with it DSP usage) is taken from ``base`` unchanged. The returned
    point's ``pr_sp2`` is the SP2 row fraction to train with.
    """
    budget = lut_cap * device.lut

    def fits(s: int) -> bool:
        dp = replace(base, blk_out_sp2=s)
        return cost.lut(dp) + device.lut_overhead <= budget

    if not fits(0):
        raise InfeasibleDesign(
            f"{device.name}: base design needs more than {lut_cap:.0%} of {device.lut} LUTs"
        )
    s = 0
    while s + step <= max_blk_out_sp2 and fits(s + step):
        s += step
    return replace(base, device=device.name, blk_out_sp2=s)


def candidate_table(device: Device, base: DesignPoint, cost: LutCostModel,
                    lut_cap: float = 0.7, step: int = 8) -> list[dict]:
    """Rows for every SP2 size up to one step past the selected point."""
    chosen = select_ratio(device, base, cost, lut_cap, step)
    rows = []
    for s in range(0, chosen.blk_out_sp2 + 2 * step, step):
        dp = replace(base, device=device.name, blk_out_sp2=s)
        lut = cost.lut(dp) + device.lut_overhead
        rows.append({
            "blk_out_sp2": s,
            "ratio": dp.ratio_label,
            "pr_sp2": dp.pr_sp2,
            "lut": round(lut),
            "lut_util": lut / device.lut,
            "dsp": round(cost.dsp(dp)),
            "dsp_util": cost.dsp(dp) / device.dsp,
            "peak_gops": peak_throughput(dp),
            "feasible": lut <= lut_cap * device.lut,
            "chosen": s == chosen.blk_out_sp2,
        })
    return rows


@dataclass(frozen=True)
class ThroughputEstimate:
    gops: float
    utilization: float
    peak_gops: float


def estimate_layer_throughput(dp: DesignPoint, stats: GemmStats) -> ThroughputEstimate:
    """Achieved GOPS = peak * useful MACs / (useful MACs + idle PE slots)."""
    u = stats.utilization
    peak = peak_throughput(dp)
    return ThroughputEstimate(peak * u, u, peak)


def estimate_network_throughput(dp: DesignPoint, layer_stats) -> ThroughputEstimate:
    """Aggregate over layers, weighting each layer by its PE slots."""
    useful = sum(s.total_macs for s in layer_stats)
    slots = sum(s.total_macs + s.idle_slots for s in layer_stats)
    u = useful / slots if slots else 1.0
    peak = peak_throughput(dp)
    return ThroughputEstimate(peak * u, u, peak)


# --- device database ------------------------------------------------------------


def load_devices(path=None) -> dict[str, Device]:
    if path is None:
        text = resources.files("msq").joinpath("data/devices.json").read_text()
    else:
        text = Path(path).read_text()
    raw = json.loads(text)
    devices = {}
    for name, d in raw.items():
        devices[name] = Device(
            name=name,
            lut=int(d["lut"]),
            dsp=int(d["dsp"]),
            bram36=float(d["bram36"]),
            ff=int(d["ff"]),
            freq_mhz=float(d.get("freq_mhz", 100.0)),
            lut_overhead=float(d.get("lut_overhead", 0.0)),
            base_design=dict(d.get("base_design", {})),
            calibration=tuple(d.get("calibration", ())),
        )
    return devices


def get_device(name: str, path=None) -> Device:
    devices = load_devices(path)
    if name not in devices:
        raise UnknownDevice(name)
    return devices[name]


def base_point(device: Device) -> DesignPoint:
    b = device.base_design
    return DesignPoint(device.name, int(b["bat"]), int(b["blk_in"]), int(b["blk_out_fixed"]),
                       0, device.freq_mhz)


def device_cost_model(device: Device) -> LutCostModel:
    """Fit the cost model from the device's shipped calibration measurements."""
    pts = []
    for c in device.calibration:
        dp = DesignPoint(device.name, c["bat"], c["blk_in"], c["blk_out_fixed"],
                         c["blk_out_sp2"], device.freq_mhz)
        pts.append((dp, c["lut"], c["dsp"]) if "dsp" in c else (dp, c["lut"]))
    return calibrate_lut_model(pts)


def characterize(device: Device, lut_cap: float = 0.7, step: int = 8) -> tuple[DesignPoint, list[dict]]:
    cost = device_cost_model(device)
    base = base_point(device)
    return select_ratio(device, base, cost, lut_cap, step), candidate_table(device, base, cost, lut_cap, step)
