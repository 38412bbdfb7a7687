"""Small on-disk federations shared by the training, attack and command tests."""
from pathlib import Path

from fedseg.config import TrainConfig
from fedseg.segmentation_model import ModelConfig
from fedseg.synth_data import ClientSpec, RadiusDist, build_federation, load_federation

SIZE = (16, 16)
MODEL = ModelConfig(base_channels=2)


def tiny_specs():
    return [
        ClientSpec(1, 10, RadiusDist(0.08, 0.25, "large-skew")),
        ClientSpec(2, 5, RadiusDist(0.03, 0.10, "small-skew"), noise_sigma=0.10),
    ]


def build_tiny(out_dir, seed=5, specs=None, shadow_count=40):
    """Two clients (8+2 and 4+1 slices), 8 test slices, a 20/20 shadow pool, 16x16 pixels."""
    return build_federation(
        seed, Path(out_dir), size=SIZE, specs=specs or tiny_specs(), test_count=8, shadow_count=shadow_count
    )


def tiny_federation(out_dir, seed=5):
    return load_federation(build_tiny(out_dir, seed))


def train_config(method="fedavg", **overrides):
    values = dict(method=method, lr=0.05, batch_size=4, rounds=2, lr_decay_at=0, weight_decay=1e-4)
    values.update(overrides)
    return TrainConfig(**values)


def build_wide(out_dir, seed=6):
    """Four identical clients of 200+50 slices at 16x16, enough targets for a 200/200 attack."""
    specs = [ClientSpec(cid, 250, RadiusDist(0.05, 0.20)) for cid in range(1, 5)]
    return build_federation(seed, Path(out_dir), size=SIZE, specs=specs, test_count=8, shadow_count=40)
