from __future__ import annotations

import numpy as np
import pytest

from synthcomp.backgrounds import build_zero_shot_backgrounds
from synthcomp.config import ClassVocabulary, PipelineConfig
from synthcomp.foreground import build_foreground_assets
from synthcomp.gateway import Gateway, StubBackend
from synthcomp.prompts import Lexicon


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def lexicon():
    return Lexicon.load()


@pytest.fixture(scope="session")
def small_vocab():
    return ClassVocabulary.from_labels(["dog", "cat", "bus"], {"dog": ["puppy"], "cat": ["kitten", "cats"]})


@pytest.fixture(scope="session")
def small_config():
    return PipelineConfig(
        captions_per_cdi=2,
        images_per_caption=8,
        keep_per_caption=3,
        zero_shot_templates=4,
        images_per_zero_shot_template=10,
        fg_templates=("A photo of <object>", "<object> isolated on white background"),
        fg_images_per_template=6,
        fg_keep_per_template=4,
        target_dataset_size=50,
        image_size=(96, 96),
        master_seed=7,
    )


@pytest.fixture(scope="session")
def stub_gateway(small_config):
    return Gateway(StubBackend(small_config.fg_templates), small_config.image_size, max_in_flight=2)


@pytest.fixture(scope="session")
def stores(small_config, small_vocab, stub_gateway):
    fg, _ = build_foreground_assets(small_vocab, small_config, stub_gateway)
    bg, _ = build_zero_shot_backgrounds(small_vocab, small_config, stub_gateway)
    return fg, bg


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
