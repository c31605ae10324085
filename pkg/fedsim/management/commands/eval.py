import json

from ... import evasion, networks, orchestrator, utils
from ...exceptions import ConfigError
from ..base import FedsimCommand


class Command(FedsimCommand):
    help = "Evaluate a checkpoint under clean, PGD, logit-scaled and transfer attacks"

    def add_arguments(self, parser):
        parser.add_argument("--ckpt", required=True, help="Checkpoint to evaluate")
        parser.add_argument("--config", required=True, help="Experiment config giving the architecture, dataset and evaluation attack")
        parser.add_argument("--surrogate", help="Checkpoint used to craft transfer attacks")
        parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Override a config field by dotted key (repeatable)")
        parser.add_argument("--out", help="Write the report as JSON to this path")
        parser.add_argument("--data-dir", help="Dataset root (default: FEDSIM_DATA_DIR)")

    def run(self, *args, **options):
        self.check_files(ckpt=options["ckpt"], config=options["config"], surrogate=options["surrogate"])
        cfg = orchestrator.ExperimentConfig.from_file(options["config"], options["overrides"])
        params, round_index = networks.load_checkpoint(options["ckpt"], cfg.arch)
        surrogate_path = options["surrogate"] or cfg.surrogate_checkpoint
        surrogate = orchestrator.load_surrogate(surrogate_path, cfg.data["arch"]) if surrogate_path else None
        _train, test = orchestrator.load_splits(cfg, options["data_dir"])

        accuracies = evasion.evaluate_suite(params, test, cfg.pgd_eval, utils.derive_seed(cfg.seed, "eval", round_index), logit_scale_T=cfg.logit_scale_T,
                                            surrogate=surrogate, batch_size=cfg.eval_batch_size, workers=cfg.workers)
        report = {
            "checkpoint": options["ckpt"],
            "round": round_index,
            "test_samples": len(test),
            "pgd": cfg.pgd_eval.to_dict(),
            "logit_scale_T": cfg.logit_scale_T,
            "surrogate": surrogate_path,
            "clean_acc": accuracies["clean"],
            "adv_pgd": accuracies["pgd"],
            "adv_logit_scaled": accuracies.get("logit_scaled"),
            "adv_transfer": accuracies.get("transfer"),
        }
        for key in ("clean_acc", "adv_pgd", "adv_logit_scaled", "adv_transfer"):
            if report[key] is not None:
                self.stdout.write(f"{key:<18} {report[key]:.4f}")
        if options["out"]:
            try:
                with open(options["out"], "w", encoding="utf-8") as f:
                    json.dump(report, f, indent=2)
            except OSError as error:
                raise ConfigError({"out": [f"Cannot write {options['out']}: {error.strerror}"]})
            self.stdout.write(self.style.SUCCESS(f"Report written to {options['out']}"))
