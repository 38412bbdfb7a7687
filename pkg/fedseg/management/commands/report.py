import logging
from pathlib import Path
from typing import Dict, List

from django.core.management.base import CommandError

from fedseg import metrics_io
from fedseg.management.base import FedSegCommand
from fedseg.management.commands.run import EXPERIMENT_FILE
from fedseg.methods import METHOD_NAMES

logger = logging.getLogger(__name__)


def method_order(runs: Path) -> List[str]:
    """Methods in the order the experiment listed them, else registry order."""
    experiment = runs / EXPERIMENT_FILE
    present = [p.name for p in runs.iterdir() if p.is_dir() and any(p.glob("seed*/history.csv"))]
    if experiment.is_file():
        listed = metrics_io.read_summary(experiment).get("methods", "")
        order = [m for m in listed.split(",") if m in present]
    else:
        order = []
    rest = sorted((m for m in present if m not in order), key=lambda m: (METHOD_NAMES.index(m) if m in METHOD_NAMES else len(METHOD_NAMES), m))
    return order + rest


def load_histories(runs: Path, method: str) -> List[metrics_io.ExperimentHistory]:
    histories = []
    for seed_dir in sorted((runs / method).glob("seed*")):
        csv_path = seed_dir / "history.csv"
        if not csv_path.is_file():
            continue
        try:
            seed = int(seed_dir.name[len("seed"):])
        except ValueError:
            logger.warning(f"Skipping {seed_dir}: not a seed directory")
            continue
        histories.append(metrics_io.read_history_csv(csv_path, method, seed))
    return histories


class Command(FedSegCommand):
    help = "Aggregate seeds per method into a comparison table and Dice, CE-loss and MIA-AUC curves."

    def add_arguments(self, parser):
        parser.add_argument("--runs", required=True, help="directory written by the run command")
        parser.add_argument("--out", default=None, help="report directory (default: <runs>/report)")

    def run(self, **options):
        runs = Path(options["runs"])
        if not runs.is_dir():
            raise CommandError(f"runs directory not found: {runs}", returncode=2)
        methods = method_order(runs)
        if not methods:
            raise CommandError(f"no run histories under {runs}", returncode=2)
        out = Path(options["out"]) if options["out"] else runs / "report"

        histories: Dict[str, List[metrics_io.ExperimentHistory]] = {m: load_histories(runs, m) for m in methods}
        aggregates = {m: metrics_io.aggregate_seeds(h) for m, h in histories.items() if h}
        table = metrics_io.render_table([aggregates[m] for m in methods if m in aggregates])

        checks = metrics_io.check_acceptance(aggregates, histories)
        lines = [table]
        if checks:
            lines.append("Orderings")
            lines += [f"  [{'pass' if c.passed else 'FAIL'}] {c.name}: {c.detail}" for c in checks]
        text = "\n".join(lines).rstrip("\n") + "\n"
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(text, encoding="utf-8", newline="\n")

        dice_curves = {m: metrics_io.mean_curve(h, "dice") for m, h in histories.items() if h}
        metrics_io.emit_curves_svg(dice_curves, out / "dice_curves.svg", "Segmentation Dice vs. rounds", "Dice", (0.0, 1.0))
        ce_curves = {m: metrics_io.mean_curve(h, "ce_loss") for m, h in histories.items() if h}
        metrics_io.emit_curves_svg(ce_curves, out / "ce_curves.svg", "Test BCE loss vs. rounds", "CE loss")
        auc_curves = {m: c for m, c in ((m, metrics_io.mean_curve(h, "mia_auc")) for m, h in histories.items() if h) if c}
        if auc_curves:
            metrics_io.emit_curves_svg(auc_curves, out / "mia_curves.svg", "Membership-inference AUC vs. rounds", "AUC", (0.0, 1.0))

        self.stdout.write(text)
        self.stdout.write(self.style.SUCCESS(str(out)))
