from ... import metrics
from ..base import FedsimCommand


class Command(FedsimCommand):
    help = "Merge metrics.jsonl files into a tidy CSV of (run_id, round, metric, value)"

    def add_arguments(self, parser):
        parser.add_argument("files", nargs="+", help="metrics.jsonl files")
        parser.add_argument("--out", help="CSV destination (default: standard output)")

    def run(self, *args, **options):
        self.check_files(**{f"files.{i}": path for i, path in enumerate(options["files"])})
        if options["out"]:
            count = metrics.export_curves(options["files"], options["out"])
            self.stdout.write(self.style.SUCCESS(f"Wrote {count} rows to {options['out']}"))
        else:
            metrics.export_curves(options["files"], self.stdout)
