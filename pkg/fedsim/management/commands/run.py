import os

from django.conf import settings

from ... import orchestrator
from ..base import FedsimCommand


class Command(FedsimCommand):
    help = "Run a federated adversarial training experiment from a JSON config"

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Experiment config (JSON)")
        parser.add_argument("--set", "--overrides", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                            help="Override a config field by dotted key, e.g. --set aggregation.rule=krum (repeatable)")
        parser.add_argument("--out", help="Output directory (default: FEDSIM_OUTPUT_DIR/<run id>)")
        parser.add_argument("--data-dir", help="Dataset root (default: FEDSIM_DATA_DIR)")

    def run(self, *args, **options):
        self.check_files(config=options["config"])
        cfg = orchestrator.ExperimentConfig.from_file(options["config"], options["overrides"])
        out_dir = options["out"] or os.path.join(settings.FEDSIM_OUTPUT_DIR, cfg.run_id)
        records = orchestrator.run_experiment(cfg, out_dir, data_root=options["data_dir"], on_evaluation=self.print_evaluation)
        aborted = sum(record.aborted for record in records)
        self.stdout.write(self.style.SUCCESS(f"{cfg.run_id}: {len(records)} rounds ({aborted} aborted), results in {out_dir}"))

    def print_evaluation(self, record):
        line = f"round {record.round:>5}  clean {record.clean_acc:.4f}  pgd {record.adv_pgd:.4f}"
        if record.adv_logit_scaled is not None:
            line += f"  logit-scaled {record.adv_logit_scaled:.4f}"
        if record.adv_transfer is not None:
            line += f"  transfer {record.adv_transfer:.4f}"
        if record.client_clean_acc is not None:
            line += f"  per-client {record.client_clean_acc:.4f}"
        self.stdout.write(line)
