from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coh import pipeline  # noqa: E402
from coh.llm import BackendConfig  # noqa: E402
from coh.synthetic import random_tkg  # noqa: E402
from coh.tkg import augment_reversed  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
NIGERIA = FIXTURES / "nigeria"

# ids the model returned in the recorded step-1 reply
NIGERIA_STEP1_IDS = [0, 1, 2, 5, 7, 8, 9, 10, 11, 14, 17, 21, 24, 25, 26, 27, 28, 30, 31, 32,
                        33, 34, 36, 37, 38, 39, 45, 49, 50, 56]


@pytest.fixture
def nigeria():
    return pipeline.load_workspace(NIGERIA)


@pytest.fixture
def replay_config():
    return pipeline.CoHConfig(
        backend=BackendConfig.scripted(NIGERIA / "replay.jsonl"),
        fusion=pipeline.FusionConfig(alpha=0.3, w=0.0),
        max_in_flight=1,
    )


@pytest.fixture
def toy():
    kg, vocab = random_tkg(np.random.default_rng(7), num_entities=25, num_relations=4, num_facts=160)
    return augment_reversed(kg, vocab)
