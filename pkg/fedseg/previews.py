import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .synth_data import SliceSample

logger = logging.getLogger(__name__)


class PreviewRenderer:
    """PNG previews of generated slices with the tumor mask blended in red."""

    def __init__(self, scale: int = 4, overlay_alpha: float = 0.45, overlay_color: Tuple[int, int, int] = (255, 0, 0)):
        self.scale = max(1, int(scale))
        self.overlay_alpha = overlay_alpha
        self.overlay_color = overlay_color

    def render(self, sample: SliceSample) -> Image.Image:
        gray = np.clip(sample.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
        base = Image.fromarray(gray).convert("RGB")
        overlay = Image.new("RGB", base.size, self.overlay_color)
        mask = Image.fromarray(np.where(sample.mask > 0, int(255 * self.overlay_alpha), 0).astype(np.uint8))
        image = Image.composite(overlay, base, mask)
        if self.scale > 1:
            image = image.resize((base.width * self.scale, base.height * self.scale), Image.Resampling.NEAREST)
        return image

    def get_image_info(self, sample: SliceSample) -> Dict:
        return {
            "client_id": sample.meta.client_id,
            "sample_index": sample.meta.sample_index,
            "n_tumors": sample.meta.n_tumors,
            "mask_coverage": float(sample.mask.mean()),
            "size": sample.image.shape,
        }

    def save_previews(self, samples: Sequence[SliceSample], out_dir: Union[str, Path], prefix: str) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for sample in samples:
            path = out_dir / f"{prefix}_{sample.meta.sample_index:04d}.png"
            try:
                self.render(sample).save(path, format="PNG")
            except OSError as e:
                raise OSError(f"cannot write preview {path}: {e}") from e
            written.append(path)
        logger.info(f"Wrote {len(written)} previews for {prefix} to {out_dir}")
        return written
