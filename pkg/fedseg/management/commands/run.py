import logging
from pathlib import Path
from typing import Dict, List, Tuple

from django.conf import settings
from django.core.management.base import CommandError

from fedseg import fl_engine, metrics_io
from fedseg.config import ExperimentConfig, config_items, format_value, read_config_file
from fedseg.dp_mechanism import account_privacy
from fedseg.errors import NumericError
from fedseg.management.base import FedSegCommand
from fedseg.methods import get_method
from fedseg.mia_eval import MiaTracker
from fedseg.segmentation_model import save_checkpoint
from fedseg.synth_data import MANIFEST_NAME, Federation, load_federation
from fedseg.task_processor import ClientWorkerPool

logger = logging.getLogger(__name__)

EXPERIMENT_FILE = "experiment.txt"


def add_config_flags(parser, names):
    """One ``--field-name`` flag per ExperimentConfig field; values stay strings until config parsing."""
    for name in names:
        flag = "--" + name.replace("_", "-")
        if name == "bn_reset":
            parser.add_argument(flag, dest=name, action="store_const", const="true", default=None)
        else:
            parser.add_argument(flag, dest=name, default=None, metavar=name.upper())


def run_dir(out: Path, method: str, seed: int) -> Path:
    return out / method / f"seed{seed}"


class Command(FedSegCommand):
    help = "Run every (method, seed) experiment and write histories, summaries and checkpoints."

    def add_arguments(self, parser):
        parser.add_argument("--config", default=None, help="key=value experiment config file")
        add_config_flags(parser, ExperimentConfig.field_names())

    def run(self, **options):
        file_values = read_config_file(options["config"]) if options.get("config") else {}
        flags = {name: options.get(name) for name in ExperimentConfig.field_names()}
        if flags["data"] is None and "data" not in file_values:
            flags["data"] = settings.FEDSEG_DATA_DIR
        if flags["out"] is None and "out" not in file_values:
            flags["out"] = settings.FEDSEG_RUNS_DIR
        cfg = ExperimentConfig.from_sources(file_values, flags)

        data_path = Path(cfg.data)
        manifest_path = data_path if data_path.is_file() else data_path / MANIFEST_NAME
        if not manifest_path.exists():
            raise CommandError(f"dataset manifest not found: {manifest_path} (run gen-data first)", returncode=2)
        federation = load_federation(manifest_path)
        if federation.manifest.scale != cfg.scale:
            logger.warning(f"Dataset scale {federation.manifest.scale} differs from experiment scale {cfg.scale}")

        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics_io.write_summary(out / EXPERIMENT_FILE, {"experiment": cfg.items()})

        trackers: Dict[int, MiaTracker] = {}
        with ClientWorkerPool(cfg.threads or None) as pool:
            for method in cfg.methods:
                for seed in cfg.seeds:
                    try:
                        history = self.run_one(cfg, federation, method, seed, out, pool, trackers)
                    except NumericError as e:
                        raise CommandError(f"{method} seed {seed} failed: {e}", returncode=1) from e
                    final = history.final
                    if final is not None:
                        auc = f", AUC {final.mia_auc:.3f}" if final.mia_auc is not None else ""
                        self.stdout.write(f"{method} seed {seed}: Dice {final.dice:.4f}, CE {final.ce_loss:.4f}{auc}")
                    else:
                        self.stdout.write(f"{method} seed {seed}: no rounds")
        self.stdout.write(self.style.SUCCESS(f"{len(cfg.methods) * len(cfg.seeds)} runs written to {out}"))

    def tracker_for(self, cfg: ExperimentConfig, federation: Federation, seed: int, cache: Dict[int, MiaTracker]):
        if cfg.mia_cadence == 0:
            return None
        if seed not in cache:
            # the shadow attack depends only on the seed and the optimizer settings
            cache[seed] = MiaTracker.build(
                federation,
                cfg.train_config("centralized"),
                seed,
                cfg.model_config(),
                samples=cfg.mia_samples,
                cadence=cfg.mia_cadence,
                shadow_models=cfg.shadow_models,
            )
        return cache[seed].fork()

    def run_one(
        self,
        cfg: ExperimentConfig,
        federation: Federation,
        method: str,
        seed: int,
        out: Path,
        pool: ClientWorkerPool,
        trackers: Dict[int, MiaTracker],
    ) -> metrics_io.ExperimentHistory:
        train = cfg.train_config(method)
        dp = cfg.dp_config()
        model_config = cfg.model_config()
        profile = get_method(method)
        tracker = self.tracker_for(cfg, federation, seed, trackers)
        target = run_dir(out, method, seed)
        extra: List[Tuple[str, str]] = []

        logger.info(f"Starting {method} seed {seed}: {train.rounds} rounds")
        if method == "centralized":
            result = fl_engine.train_centralized(federation, train, seed, model_config, tracker=tracker)
            history, params = result.history, result.params
            save_checkpoint(params, target / "model.fobp")
        elif method == "local_only":
            result = fl_engine.train_local_only(federation, train, seed, model_config, tracker=tracker, pool=pool)
            history = result.history
            for cid, client_history in result.per_client.items():
                metrics_io.write_history_csv(client_history, target / f"history_client{cid}.csv")
                save_checkpoint(result.params[cid], target / f"model_client{cid}.fobp")
                final = client_history.final
                extra.append((f"result.client{cid}.final_dice", format_value(final.dice) if final else ""))
        else:
            result = fl_engine.run_federated(
                federation, train, seed, model_config, dp=dp if profile.uses_dp else None, tracker=tracker, pool=pool
            )
            history, params = result.history, result.params
            save_checkpoint(params, target / "model.fobp")

        metrics_io.write_history_csv(history, target / "history.csv")
        sections = {
            "run": [
                ("method", method),
                ("seed", str(seed)),
                ("scale", cfg.scale),
                ("data", str(cfg.data)),
                ("data_global_seed", str(federation.manifest.global_seed)),
            ],
            "train": config_items(train, "train."),
            "dp": config_items(dp, "dp."),
            "model": config_items(model_config, "model."),
            "experiment": config_items(cfg, "experiment."),
            "result": [(f"result.{k}", v) for k, v in metrics_io.history_summary_items(history)] + extra,
        }
        if profile.uses_dp:
            epsilon = account_privacy(dp.noise_sigma, train.rounds, dp.delta)
            sections["privacy"] = [
                ("privacy.epsilon", format_value(epsilon)),
                ("privacy.delta", format_value(dp.delta)),
                ("privacy.noise_sigma", format_value(dp.noise_sigma)),
                ("privacy.clip_norm", format_value(dp.clip_norm)),
                ("privacy.rounds", str(train.rounds)),
            ]
            logger.info(f"{method} seed {seed}: epsilon {epsilon:.3f} at delta {dp.delta}")
        if tracker is not None:
            sections["attack"] = [
                ("attack.series", ",".join(f"{r}:{auc!r}" for r, auc in tracker.series)),
                ("attack.final_auc", metrics_io.format_optional(history.final_metric("mia_auc"))),
            ] + [(f"attack.{k}", v) for k, v in tracker.attack.items()]
        metrics_io.write_summary(target / "summary.txt", sections)
        return history
