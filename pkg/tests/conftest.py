import numpy as np
import pytest
import torch

from stssl.dataset import SyntheticWorldConfig, build_world, render_synthetic
from stssl.model import BackboneConfig

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def tiny_backbone(variant: str = "teacher", **kw) -> BackboneConfig:
    base = dict(image_size=8, patch_size=4, embed_dim=16, depth=2, num_heads=2, mlp_ratio=2.0, num_classes=4)
    base.update(kw)
    fusion = base.pop("fusion", "early-metatoken" if variant == "teacher" else "none")
    return BackboneConfig(variant=variant, fusion=fusion, **base)


@pytest.fixture
def teacher_cfg():
    return tiny_backbone("teacher")


@pytest.fixture
def student_cfg():
    return tiny_backbone("student")


def random_meta(n: int, rng: np.random.Generator, with_time: bool = True) -> torch.Tensor:
    lat = rng.uniform(-90, 90, n)
    lon = rng.uniform(-180, 180, n)
    day = rng.uniform(0, 365, n) if with_time else np.full(n, np.nan)
    return torch.from_numpy(np.stack([lat, lon, day], axis=1)).float()


@pytest.fixture(scope="session")
def small_world():
    cfg = SyntheticWorldConfig(samples_total=240, num_classes=4, num_regions=4, image_size=8, seed=3)
    return cfg, build_world(cfg)


@pytest.fixture(scope="session")
def small_dataset(small_world):
    cfg, world = small_world
    return render_synthetic(cfg, "train", world).to_dataset(world)
