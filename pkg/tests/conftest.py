import numpy as np
import pytest

from cvlnm.config import ModelConfig
from cvlnm.decoder import CVLNM
from cvlnm.encoders import FeatureSet
from cvlnm.reason import TripletRecord, memory_vocabulary

TRIPLETS = [TripletRecord("dog", "on", "grass", 3.0), TripletRecord("man", "riding", "horse", 2.0),
            TripletRecord("cat", "near", "dog", 1.5), TripletRecord("dog", "under", "table", 1.0),
            TripletRecord("bus", "on", "road", 0.5)]


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=9, d_r=8, d_v=4, k=2, d_h=6, d_a=5, d_z=8, j=2, d_e=3, d_m=4, d_word=5,
                memory_vocab=memory_vocabulary(TRIPLETS))
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, triplets=TRIPLETS, **kw) -> CVLNM:
    return CVLNM(tiny_config(**kw), triplets if kw.get("use_reason", True) else None, seed=seed)


def random_features(rng, n=3, d_r=8) -> FeatureSet:
    return FeatureSet(rng.normal(size=(n, d_r)), rng.normal(size=(n, d_r)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
