from pathlib import Path

from django.core.management.base import CommandError

from fedseg import metrics_io
from fedseg.config import ExperimentConfig, read_config_file
from fedseg.management.base import FedSegCommand
from fedseg.management.commands.run import add_config_flags
from fedseg.mia_eval import attack_auc, sample_targets, train_attack, train_shadow
from fedseg.segmentation_model import load_checkpoint
from fedseg.synth_data import MANIFEST_NAME, load_federation

ATTACK_FLAGS = ("scale", "rounds", "local_epochs", "lr", "batch_size", "base_channels", "mia_samples", "shadow_models")


class Command(FedSegCommand):
    help = "Train shadow and attack models, then measure membership-inference AUC against a checkpoint."

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True, help="model checkpoint (.fobp)")
        parser.add_argument("--manifest", required=True, help="dataset directory or manifest file")
        parser.add_argument("--seed", type=int, default=0, help="attack seed (shadow init, target sampling)")
        parser.add_argument("--report", default=None, help="report path (default: next to the checkpoint)")
        parser.add_argument("--config", default=None, help="key=value experiment config file")
        add_config_flags(parser, ATTACK_FLAGS)

    def run(self, **options):
        checkpoint = Path(options["checkpoint"])
        if not checkpoint.is_file():
            raise CommandError(f"checkpoint not found: {checkpoint}", returncode=2)
        manifest = Path(options["manifest"])
        if manifest.is_dir():
            manifest = manifest / MANIFEST_NAME
        if not manifest.is_file():
            raise CommandError(f"dataset manifest not found: {manifest}", returncode=2)

        file_values = read_config_file(options["config"]) if options.get("config") else {}
        flags = {name: options.get(name) for name in ATTACK_FLAGS}
        cfg = ExperimentConfig.from_sources(file_values, flags)
        explicit_width = flags.get("base_channels") is not None or "base_channels" in file_values
        target = load_checkpoint(checkpoint, cfg.model_config() if explicit_width else None)
        model_config = target.config

        seed = options["seed"]
        federation = load_federation(manifest)
        train = cfg.train_config("centralized")
        shadows = [train_shadow(federation.shadow_members, train, seed, model_config, index=i) for i in range(cfg.shadow_models)]
        attack = train_attack(shadows, federation.shadow_members, federation.shadow_nonmembers, shadow_seed=seed)
        members, nonmembers = sample_targets(federation, cfg.mia_samples, seed)
        auc = attack_auc(attack, target, members, nonmembers)

        report = Path(options["report"]) if options["report"] else checkpoint.with_name(f"{checkpoint.stem}.attack.txt")
        metrics_io.write_summary(
            report,
            {
                "attack": [
                    ("checkpoint", str(checkpoint)),
                    ("manifest", str(manifest)),
                    ("seed", str(seed)),
                    ("base_channels", str(model_config.base_channels)),
                    ("shadow_models", str(cfg.shadow_models)),
                    ("shadow_rounds", str(train.rounds)),
                    ("members", str(len(members))),
                    ("nonmembers", str(len(nonmembers))),
                    ("auc", repr(auc)),
                ],
                "attack model": attack.items(),
            },
        )
        self.stdout.write(f"membership-inference AUC {auc:.4f}")
        self.stdout.write(self.style.SUCCESS(str(report)))
