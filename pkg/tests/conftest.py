import os

import numpy as np
import pytest

from ftz import fusion, vit
from ftz.config import load_config
from ftz.mllm import LMConfig, ModelConfig, Tokenizer, build_model

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
REFERENCE_CONFIG = os.path.join(ROOT, "configs", "reference.toml")

TINY_ANCHOR = vit.ViTConfig(image_size=32, patch_size=8, depth=2, dim=16, heads=2)
TINY_AUGMENT = vit.ViTConfig(image_size=32, patch_size=8, depth=2, dim=12, heads=2,
                             norm_mean=vit.IMAGENET_MEAN, norm_std=vit.IMAGENET_STD)


def tiny_model_config(mode="ftz", k=2, **kw) -> ModelConfig:
    tower = fusion.ComposedEncoderConfig(TINY_ANCHOR, TINY_AUGMENT, mode, k, 2)
    lm = LMConfig(vocab_size=32, dim=16, depth=1, heads=2, max_seq_len=48)
    return ModelConfig(tower, lm, connector_hidden=16, **kw)


@pytest.fixture
def tokenizer():
    return Tokenizer()


@pytest.fixture
def tiny_model():
    return build_model(tiny_model_config(), seed=3)


@pytest.fixture(scope="session")
def reference_config():
    return load_config(REFERENCE_CONFIG)


def random_images(n, seed=0, size=32):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, size, size, 3), dtype=np.uint8)


# acceptance results, printed as one line per criterion at the end of the session
ACCEPTANCE = []


def record_criterion(name: str, ok: bool, detail: str, seconds: float) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail} [{seconds:.1f}s]"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
