"""
Throughput benchmark over the simulated stack.

`run_matrix` sweeps block sizes for three hardware setups in both
directions and measures what a retrying DUT host achieves, in simulated
time. `analytic_matrix` evaluates the same grid from the bus model alone,
and `calibrate` grid-searches the model constants against the anchor set
checked by `check_anchors`.
"""
import csv
import dataclasses
import enum
import itertools
import logging
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from tqdm import tqdm

from .bus import CALIBRATED_MODEL, BusConfig, Direction, expected_throughput, negotiate_mode
from .dut_host import HostSession
from .exceptions import CalibrationInfeasible, ConfigError, RetriesExhausted
from .sd_core import BLOCK_SIZE, CSD_CAPACITY_UNIT, MemoryImage, SdCard
from .switch import SdSwitch

logger = logging.getLogger(__name__)

KIB = 1024
BLOCK_SIZES = tuple(4 * KIB << i for i in range(9))        # 4 KiB .. 1 MiB
DEFAULT_VOLUME = 8 * 1024 * 1024
CSV_HEADER = ("direction", "block_size", "config", "mbps", "retries")
ANCHOR_BLOCK = 64 * KIB
WRITE_PEAK_BLOCK = 32 * KIB

CALIBRATION_PARAMS = (
    "p_bit_uhs",
    "per_command_overhead_us",
    "switch_insertion_overhead_us",
    "legacy_mode_overhead_us",
)
CALIBRATION_FACTORS = tuple(0.5 + i / 6 for i in range(7))  # 0.5 .. 1.5


class BenchConfig(str, enum.Enum):
    BASELINE = "baseline"
    SWITCH_NO_PULLUPS = "switch_no_pullups"
    SWITCH_WITH_PULLUPS = "switch_with_pullups"

    def bus_config(self, seed=0):
        if self is BenchConfig.BASELINE:
            return BusConfig(explicit_pullups=False, switched=False, seed=seed)
        return BusConfig(explicit_pullups=self is BenchConfig.SWITCH_WITH_PULLUPS, seed=seed)


@dataclass(frozen=True)
class ThroughputSample:
    direction: Direction
    block_size: int
    config: BenchConfig
    mbytes_per_s: float
    retries: int = 0
    exhausted: bool = False

    def csv_row(self):
        return (self.direction.value, self.block_size, self.config.value,
                f"{self.mbytes_per_s:.4f}", self.retries)


def cell_seed(seed, direction, config, block_size):
    """Seed for one matrix cell; independent of the order cells run in."""
    key = f"{seed}:{Direction(direction).value}:{BenchConfig(config).value}:{block_size}"
    return random.Random(key).getrandbits(64)


def _card_capacity(volume_bytes):
    units = max(1, -(-volume_bytes // CSD_CAPACITY_UNIT))
    return units * CSD_CAPACITY_UNIT


def run_cell(direction, block_size, config, seed=0, volume_bytes=DEFAULT_VOLUME,
             retry_limit=64, model=CALIBRATED_MODEL):
    """One (direction, block size, setup) measurement on a fresh card."""
    direction = Direction(direction)
    config = BenchConfig(config)
    rng_seed = cell_seed(seed, direction, config, block_size)
    capacity = _card_capacity(volume_bytes)
    card = SdCard(MemoryImage(capacity), capacity, serial=seed)
    switch = SdSwitch(card, config.bus_config(rng_seed), ports=("dut",), default_port="dut", model=model)
    switch.grant("dut")
    host = HostSession(switch, "dut", retry_limit=retry_limit)
    host.init()
    try:
        mbps = host.throughput(direction, volume_bytes, block_size, seed=rng_seed)
    except RetriesExhausted:
        logger.info("%s %s @ %d: retry budget exhausted", direction.value, config.value, block_size)
        return ThroughputSample(direction, block_size, config, 0.0, host.stats.retries, exhausted=True)
    return ThroughputSample(direction, block_size, config, mbps, host.last_delta.retries)


def _run_cell_args(args):
    return run_cell(*args)


def matrix_cells(block_sizes=BLOCK_SIZES, configs=tuple(BenchConfig), directions=tuple(Direction)):
    return [
        (Direction(direction), block_size, BenchConfig(config))
        for direction, config, block_size in itertools.product(directions, configs, block_sizes)
    ]


def run_matrix(seed=0, volume_bytes=DEFAULT_VOLUME, retry_limit=64, block_sizes=BLOCK_SIZES,
               configs=tuple(BenchConfig), directions=tuple(Direction), out=None,
               parallel=False, workers=None, progress=False, model=CALIBRATED_MODEL):
    """
    Measure every cell of the sweep and return the samples in grid order.
    With `out`, the samples are also written as CSV. Parallel runs give the
    same numbers as sequential ones since every cell seeds itself.
    """
    if volume_bytes <= 0 or volume_bytes % BLOCK_SIZE:
        raise ConfigError(f"volume must be a positive multiple of {BLOCK_SIZE} bytes")
    cells = matrix_cells(block_sizes, configs, directions)
    jobs = [(d, b, c, seed, volume_bytes, retry_limit, model) for d, b, c in cells]
    bar = dict(total=len(jobs), desc="bench", unit="cell", disable=not progress)

    if parallel:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(tqdm(pool.map(_run_cell_args, jobs), **bar))
    else:
        samples = [run_cell(*job) for job in tqdm(jobs, **bar)]

    if out is not None:
        write_csv(samples, out)
    return samples


def write_csv(samples, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for sample in samples:
            writer.writerow(sample.csv_row())
    logger.info("Wrote %d samples to %s", len(samples), path)
    return path


def read_csv(path):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ConfigError(f"{path}: not a benchmark CSV")
        return [
            ThroughputSample(Direction(row["direction"]), int(row["block_size"]),
                             BenchConfig(row["config"]), float(row["mbps"]), int(row["retries"]))
            for row in reader
        ]


def analytic_matrix(model=CALIBRATED_MODEL, block_sizes=BLOCK_SIZES):
    """Expected throughput of every cell, straight from the bus model."""
    samples = []
    for direction, block_size, config in matrix_cells(block_sizes):
        cfg = config.bus_config()
        mode = negotiate_mode(cfg)
        mbps = expected_throughput(cfg, mode, block_size, direction, model)
        samples.append(ThroughputSample(direction, block_size, config, mbps))
    return samples


# ── anchors ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Anchor:
    name: str
    value: float
    low: float
    high: float
    target: float = None

    @property
    def ok(self):
        return self.low <= self.value <= self.high

    @property
    def residual(self):
        if self.target is not None:
            return self.value - self.target
        if self.value < self.low:
            return self.value - self.low
        if self.value > self.high:
            return self.value - self.high
        return 0.0


@dataclass
class AnchorReport:
    anchors: list = field(default_factory=list)

    @property
    def feasible(self):
        return all(anchor.ok for anchor in self.anchors)

    @property
    def loss(self):
        """Squared relative error over the targeted ratio anchors."""
        return sum((a.residual / a.target) ** 2 for a in self.anchors if a.target)

    def failures(self):
        return [anchor for anchor in self.anchors if not anchor.ok]

    def __getitem__(self, name):
        for anchor in self.anchors:
            if anchor.name == name:
                return anchor
        raise KeyError(name)


def _series(samples, direction, config):
    rows = [s for s in samples if s.direction is direction and s.config is config]
    return {s.block_size: s.mbytes_per_s for s in sorted(rows, key=lambda s: s.block_size)}


def _ratio(a, b):
    return a / b if b else math.inf


def _nondecreasing(values):
    return all(x <= y for x, y in zip(values, values[1:]))


def _unimodal_at(series, peak):
    sizes = list(series)
    if not series or max(series, key=series.get) != peak:
        return False
    i = sizes.index(peak)
    values = [series[s] for s in sizes]
    return _nondecreasing(values[:i + 1]) and _nondecreasing(values[i:][::-1])


def check_anchors(samples):
    """
    Evaluate the throughput anchors on a full sweep (measured or analytic).
    Boolean shape checks are reported as 1.0/0.0 against the band [1, 1].
    """
    R, W = Direction.READ, Direction.WRITE
    base, nop, withp = BenchConfig.BASELINE, BenchConfig.SWITCH_NO_PULLUPS, BenchConfig.SWITCH_WITH_PULLUPS
    read = {c: _series(samples, R, c) for c in BenchConfig}
    write = {c: _series(samples, W, c) for c in BenchConfig}
    at = ANCHOR_BLOCK

    degradation = [1.0 - _ratio(read[withp][s], read[nop][s]) for s in read[nop] if s in read[withp]]
    read_monotone = all(
        _nondecreasing([v for s, v in read[c].items() if s <= at]) for c in BenchConfig
    )
    above_peak = [s for s in write[nop] if s > WRITE_PEAK_BLOCK]

    anchors = [
        Anchor("read_nop_over_withp", _ratio(read[nop][at], read[withp][at]), 2.5, 3.5, 3.0),
        Anchor("read_nop_over_baseline", _ratio(read[nop][at], read[base][at]), 0.65, 0.79, 0.72),
        Anchor("read_degradation_min", min(degradation), 0.30, 0.65),
        Anchor("read_degradation_max", max(degradation), 0.30, 0.65),
        Anchor("write_withp_over_nop", _ratio(write[withp][at], write[nop][at]), 1.6, 2.4, 2.0),
        Anchor("write_withp_over_baseline", _ratio(write[withp][at], write[base][at]), 0.35, 0.45, 0.40),
        Anchor("write_nop_peak_at_32k", float(_unimodal_at(write[nop], WRITE_PEAK_BLOCK)), 1.0, 1.0),
        Anchor("write_withp_beats_nop_above_32k",
               float(all(write[withp][s] > write[nop][s] for s in above_peak)), 1.0, 1.0),
        Anchor("read_nondecreasing_to_64k", float(read_monotone), 1.0, 1.0),
        Anchor("read_baseline_mbps", read[base][at], 20.0, math.inf),
        Anchor("write_baseline_mbps", write[base][at], 12.0, math.inf),
    ]
    return AnchorReport(anchors)


# ── calibration ─────────────────────────────────────────────────────

@dataclass
class CalibrationResult:
    model: object
    report: AnchorReport
    candidates: int
    feasible: int


def calibrate(model=CALIBRATED_MODEL, factors=CALIBRATION_FACTORS, params=CALIBRATION_PARAMS,
              report_path=None):
    """
    Grid-search `params` as multiples of their current values and keep the
    feasible model with the smallest ratio error. Raises
    CalibrationInfeasible when no grid point satisfies every anchor.
    """
    best = None
    candidates = feasible = 0
    for combo in itertools.product(factors, repeat=len(params)):
        values = {name: getattr(model, name) * factor for name, factor in zip(params, combo)}
        candidate = dataclasses.replace(model, **values)
        report = check_anchors(analytic_matrix(candidate))
        candidates += 1
        if not report.feasible:
            continue
        feasible += 1
        if best is None or report.loss < best.report.loss:
            best = CalibrationResult(candidate, report, 0, 0)

    if best is None:
        closest = check_anchors(analytic_matrix(model))
        failed = ", ".join(a.name for a in closest.failures())
        raise CalibrationInfeasible(f"none of {candidates} grid points satisfies every anchor ({failed})")

    best.candidates, best.feasible = candidates, feasible
    logger.info("Calibration: %d of %d grid points feasible, loss %.5f",
                feasible, candidates, best.report.loss)
    if report_path is not None:
        write_report(best, params, report_path)
    return best


def format_report(result, params=CALIBRATION_PARAMS):
    lines = ["NetSD bus model calibration", ""]
    lines.append(f"grid points: {result.candidates}, feasible: {result.feasible}")
    lines.append(f"loss: {result.report.loss:.6f}")
    lines.append("")
    lines.append("constants:")
    for f in dataclasses.fields(result.model):
        marker = "*" if f.name in params else " "
        lines.append(f" {marker} {f.name} = {getattr(result.model, f.name)!r}")
    lines.append("")
    lines.append("anchors:")
    for a in result.report.anchors:
        target = "-" if a.target is None else f"{a.target:g}"
        lines.append(f"   {a.name:34} {a.value:10.4f}  band [{a.low:g}, {a.high:g}]"
                     f"  target {target:>5}  residual {a.residual:+.4f}  {'ok' if a.ok else 'FAIL'}")
    return "\n".join(lines) + "\n"


def write_report(result, params, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_report(result, params))
    logger.info("Wrote calibration report to %s", path)
    return path
