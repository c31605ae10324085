# Standard imports
import csv
import json
import os

# Third-party imports
import numpy
from rest_framework.renderers import JSONRenderer

# Local imports
from .exceptions import SchemaError
from .serializers import METRICS_SCHEMA_VERSION, RoundRecordSerializer

# Record fields exported as curves
METRIC_FIELDS = ("clean_acc", "adv_pgd", "adv_logit_scaled", "adv_transfer", "client_clean_acc", "train_loss", "l2_proximity")

CURVE_HEADER = ("run_id", "round", "metric", "value")

SUMMARY_HEADER = ("run_id", "evaluations", "best_round", "best_adv_pgd", "clean_at_best", "final_round", "final_clean_acc", "final_adv_pgd", "tail_clean_acc",
                  "tail_adv_pgd", "tail_adv_logit_scaled")


# Render one round record as a JSON line (bytes, newline-terminated)
def render_record(record):
    return JSONRenderer().render(RoundRecordSerializer(record).data) + b"\n"


# Append-only writer for metrics.jsonl
class MetricsWriter:
    def __init__(self, path):
        self.path = path
        self.file = open(path, "wb")

    def write(self, record):
        self.file.write(render_record(record))
        self.file.flush()

    def close(self):
        self.file.close()

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()


def read_records(path):
    """ Read a metrics.jsonl file, checking every record's schema version

    Returns
    -------
    list of dict
        The records in file order (blank lines skipped)
    """

    if not os.path.isfile(path):
        raise SchemaError(f"Metrics file not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as error:
                raise SchemaError(f"{path}:{line_number}: not valid JSON ({error})")
            version = record.get("schema_version") if isinstance(record, dict) else None
            if version != METRICS_SCHEMA_VERSION:
                raise SchemaError(f"{path}:{line_number}: schema version {version}, expected {METRICS_SCHEMA_VERSION}")
            if "run_id" not in record or "round" not in record:
                raise SchemaError(f"{path}:{line_number}: record is missing run_id or round")
            records.append(record)
    return records


# Tidy (run_id, round, metric, value) rows for every non-null metric
def curve_rows(records, metrics=METRIC_FIELDS):
    rows = []
    for record in records:
        for metric in metrics:
            value = record.get(metric)
            if value is not None:
                rows.append((record["run_id"], record["round"], metric, value))
    return rows


def export_curves(paths, out):
    """ Merge metrics files into one tidy CSV

    Parameters
    ----------
    paths : list of str
        metrics.jsonl files (inputs are only read)
    out : str or file
        Destination path, or an open text file

    Returns
    -------
    int
        The number of data rows written
    """

    rows = []
    for path in paths:
        rows.extend(curve_rows(read_records(path)))
    if isinstance(out, str):
        with open(out, "w", newline="", encoding="utf-8") as f:
            _write_csv(f, CURVE_HEADER, rows)
    else:
        _write_csv(out, CURVE_HEADER, rows)
    return len(rows)


def _write_csv(f, header, rows):
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)


# Records that carry an evaluation
def evaluations(records):
    return [record for record in records if record.get("clean_acc") is not None]


def _mean(values):
    values = [value for value in values if value is not None]
    return float(numpy.mean(values)) if values else None


def summarize(records, tail=5):
    """ Headline numbers for one run

    Best PGD adversarial accuracy (with the clean accuracy of the same
    evaluation), the final evaluation, and means over the last `tail`
    evaluations. Runs are keyed by run_id, so several files may be merged.

    Returns
    -------
    list of dict
        One summary per run_id, in first-seen order
    """

    runs = {}
    for record in records:
        runs.setdefault(record["run_id"], []).append(record)
    summaries = []
    for run_id, run_records in runs.items():
        evals = evaluations(run_records)
        summary = {key: None for key in SUMMARY_HEADER}
        summary.update({"run_id": run_id, "evaluations": len(evals)})
        if evals:
            scored = [record for record in evals if record.get("adv_pgd") is not None]
            if scored:
                best = max(scored, key=lambda record: (record["adv_pgd"], -record["round"]))
                summary.update({"best_round": best["round"], "best_adv_pgd": best["adv_pgd"], "clean_at_best": best["clean_acc"]})
            final = evals[-1]
            summary.update({"final_round": final["round"], "final_clean_acc": final["clean_acc"], "final_adv_pgd": final.get("adv_pgd")})
            last = evals[-tail:] if tail > 0 else evals
            summary["tail_clean_acc"] = _mean([record["clean_acc"] for record in last])
            summary["tail_adv_pgd"] = _mean([record.get("adv_pgd") for record in last])
            summary["tail_adv_logit_scaled"] = _mean([record.get("adv_logit_scaled") for record in last])
        summaries.append(summary)
    return summaries


def write_summaries(summaries, out):
    with open(out, "w", newline="", encoding="utf-8") as f:
        _write_csv(f, SUMMARY_HEADER, [[summary[key] for key in SUMMARY_HEADER] for summary in summaries])
