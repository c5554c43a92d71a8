from django.core.management.base import BaseCommand, CommandError

from netsd import bench
from netsd.bus import CALIBRATED_MODEL
from netsd.exceptions import CalibrationInfeasible, ConfigError
from netsd.gateway import parse_size


class Command(BaseCommand):
    help = "Run the read/write throughput matrix over block sizes and hardware setups."

    def add_arguments(self, parser):
        parser.add_argument("--out", default="results.csv", help="CSV output path")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--volume", default="8MiB", help="bytes moved per cell")
        parser.add_argument("--retry-limit", type=int, default=64)
        parser.add_argument("--block-sizes", help="comma-separated sizes, e.g. 16KiB,32KiB")
        parser.add_argument("--parallel", action="store_true", help="run cells in a process pool")
        parser.add_argument("--workers", type=int)
        parser.add_argument("--analytic", action="store_true",
                            help="evaluate the bus model instead of running the host")
        parser.add_argument("--calibrate", action="store_true",
                            help="grid-search the model constants instead of benchmarking")
        parser.add_argument("--report", default="calibration.txt", help="calibration report path")
        parser.add_argument("--factors",
                            help="comma-separated multiples to search, e.g. 1.0 to check the current constants")

    def handle(self, *args, **options):
        if options["calibrate"]:
            return self._calibrate(options["report"], options["factors"])

        try:
            volume = parse_size(options["volume"])
            block_sizes = bench.BLOCK_SIZES
            if options["block_sizes"]:
                block_sizes = tuple(parse_size(s) for s in options["block_sizes"].split(","))
        except ValueError as exc:
            raise CommandError(str(exc)) from exc
        if options["retry_limit"] < 1:
            raise CommandError("--retry-limit must be >= 1")

        if options["analytic"]:
            samples = bench.analytic_matrix(CALIBRATED_MODEL, block_sizes)
            bench.write_csv(samples, options["out"])
        else:
            try:
                samples = bench.run_matrix(
                    seed=options["seed"],
                    volume_bytes=volume,
                    retry_limit=options["retry_limit"],
                    block_sizes=block_sizes,
                    out=options["out"],
                    parallel=options["parallel"],
                    workers=options["workers"],
                    progress=options["verbosity"] > 0,
                )
            except ConfigError as exc:
                raise CommandError(str(exc)) from exc

        exhausted = sum(1 for s in samples if s.exhausted)
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(samples)} samples to {options['out']}"))
        if exhausted:
            self.stdout.write(self.style.WARNING(f"{exhausted} cells exhausted their retry budget"))
        self._print_anchors(samples)

    def _print_anchors(self, samples):
        try:
            report = bench.check_anchors(samples)
        except (KeyError, ValueError):
            return
        for anchor in report.anchors:
            style = self.style.SUCCESS if anchor.ok else self.style.ERROR
            self.stdout.write(style(f"  {anchor.name:34} {anchor.value:10.4f}  {'ok' if anchor.ok else 'FAIL'}"))

    def _calibrate(self, report_path, factors=None):
        try:
            grid = bench.CALIBRATION_FACTORS
            if factors:
                grid = tuple(float(f) for f in factors.split(","))
            if not grid or any(f <= 0 for f in grid):
                raise CommandError("factors must be positive numbers")
            result = bench.calibrate(CALIBRATED_MODEL, factors=grid, report_path=report_path)
        except ValueError as exc:
            raise CommandError(f"invalid factors: {factors}") from exc
        except CalibrationInfeasible as exc:
            raise CommandError(str(exc)) from exc
        self.stdout.write(self.style.SUCCESS(
            f"{result.feasible} of {result.candidates} grid points feasible; "
            f"report written to {report_path}"
        ))
