import tempfile

import numpy as np
from django.test import SimpleTestCase

from fedseg import rng
from fedseg.previews import PreviewRenderer
from fedseg.synth_data import default_client_specs, generate_slice


class PreviewTests(SimpleTestCase):
    def setUp(self):
        self.sample = generate_slice(rng.stream(1, "preview"), default_client_specs("desk")[0], (32, 32), sample_index=7)

    def test_render_scales_and_tints_the_mask(self):
        image = PreviewRenderer(scale=2).render(self.sample)
        self.assertEqual(image.size, (64, 64))
        pixels = np.asarray(image)
        y, x = np.argwhere(self.sample.mask == 1)[0]
        r, g, b = pixels[2 * y, 2 * x]
        self.assertGreater(int(r), int(g))
        y, x = np.argwhere(self.sample.mask == 0)[0]
        r, g, b = pixels[2 * y, 2 * x]
        self.assertEqual(r, g)

    def test_image_info(self):
        info = PreviewRenderer().get_image_info(self.sample)
        self.assertEqual(info["sample_index"], 7)
        self.assertEqual(info["size"], (32, 32))
        self.assertAlmostEqual(info["mask_coverage"], float(self.sample.mask.mean()))

    def test_save_previews(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = PreviewRenderer().save_previews([self.sample], tmp, "client_1")
            self.assertEqual([p.name for p in paths], ["client_1_0007.png"])
            self.assertTrue(paths[0].read_bytes().startswith(b"\x89PNG"))
