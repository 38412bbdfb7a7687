from pathlib import Path

from django.core.management.base import CommandError

from fedseg.management.base import FedSegCommand
from fedseg.previews import PreviewRenderer
from fedseg.synth_data import DATA_SCALES, MANIFEST_NAME, build_federation, read_dataset
from fedseg.task_processor import ClientWorkerPool


class Command(FedSegCommand):
    help = "Generate the synthetic client datasets, global test set, shadow pool and manifest."

    def add_arguments(self, parser):
        parser.add_argument("--out", required=True, help="output directory")
        parser.add_argument("--scale", choices=sorted(DATA_SCALES), default="desk")
        parser.add_argument("--seed", type=int, default=7, help="global dataset seed")
        parser.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        parser.add_argument("--previews", type=int, default=0, metavar="N", help="write N PNG previews per client")
        parser.add_argument("--threads", type=int, default=None, help="worker threads (default FEDSEG_THREADS)")

    def run(self, **options):
        out = Path(options["out"])
        if out.exists() and any(out.iterdir()) and not options["force"]:
            raise CommandError(f"{out} already exists and is not empty; pass --force to overwrite", returncode=2)
        if options["seed"] < 0:
            raise CommandError("--seed must be non-negative", returncode=2)

        with ClientWorkerPool(options["threads"]) as pool:
            manifest = build_federation(options["seed"], out, scale=options["scale"], pool=pool)

        if options["previews"] > 0:
            renderer = PreviewRenderer()
            for entry in manifest.clients:
                samples = read_dataset(manifest.path(entry.file))[: options["previews"]]
                renderer.save_previews(samples, out / "previews", f"client_{entry.spec.client_id}")
                infos = [renderer.get_image_info(s) for s in samples]
                coverage = sum(i["mask_coverage"] for i in infos) / len(infos)
                tumors = sum(i["n_tumors"] for i in infos)
                self.stdout.write(
                    f"client {entry.spec.client_id} previews: {len(infos)} slices, {tumors} tumors, "
                    f"mean tumor coverage {coverage:.3f}"
                )

        counts = ", ".join(str(c.spec.n_train) for c in manifest.clients)
        self.stdout.write(f"clients [{counts}], test {manifest.test_count}, shadow {manifest.shadow_count}")
        self.stdout.write(self.style.SUCCESS(str(out / MANIFEST_NAME)))
