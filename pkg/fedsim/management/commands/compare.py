from ... import metrics
from ..base import FedsimCommand


class Command(FedsimCommand):
    help = "Summarise and compare runs: best adversarial accuracy, final and tail-averaged accuracies"

    def add_arguments(self, parser):
        parser.add_argument("files", nargs="+", help="metrics.jsonl files")
        parser.add_argument("--tail", type=int, default=5, help="Average the last N evaluations (default 5)")
        parser.add_argument("--out", help="Also write the summaries as CSV")

    def run(self, *args, **options):
        self.check_files(**{f"files.{i}": path for i, path in enumerate(options["files"])})
        records = []
        for path in options["files"]:
            records.extend(metrics.read_records(path))
        summaries = metrics.summarize(records, options["tail"])

        self.stdout.write(f"{'run':<40} {'evals':>5} {'best adv':>9} {'clean@best':>10} {'final clean':>11} {'final adv':>9} {'tail adv':>9} {'tail logit':>10}")
        for summary in summaries:
            self.stdout.write(f"{summary['run_id']:<40} {summary['evaluations']:>5} {_fmt(summary['best_adv_pgd']):>9} {_fmt(summary['clean_at_best']):>10} "
                              f"{_fmt(summary['final_clean_acc']):>11} {_fmt(summary['final_adv_pgd']):>9} {_fmt(summary['tail_adv_pgd']):>9} "
                              f"{_fmt(summary['tail_adv_logit_scaled']):>10}")
        if options["out"]:
            metrics.write_summaries(summaries, options["out"])
            self.stdout.write(self.style.SUCCESS(f"Summaries written to {options['out']}"))


def _fmt(value):
    return "-" if value is None else f"{value:.4f}"
