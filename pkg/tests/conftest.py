import time
from pathlib import Path

import numpy as np
import pytest

from prefixsteer.config import load_config
from prefixsteer.experiment import Artifacts, ablate, pretrain_key, prefix_key, rldaf_key
from prefixsteer.lm import LMConfig, init_model

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"

START = time.time()
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    elapsed = time.time() - START
    for n in sorted(ACCEPTANCE):
        line = ACCEPTANCE[n]
        if n == 9:
            ok = elapsed < 600
            line = line.replace("{elapsed}", f"{elapsed:.0f}s")
            if not ok:
                line = line.replace("PASS", "FAIL", 1)
        terminalreporter.write_line(line)


@pytest.fixture
def record():
    def _record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE[n] = line
        print(line)
    return _record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return LMConfig(vocab_size=11, d_model=8, n_layers=2, n_heads=2, context_len=16, prefix_len=3)


@pytest.fixture
def tiny_lm(tiny_config):
    return init_model(tiny_config, seed=3)


@pytest.fixture(scope="session")
def topic_cfg():
    return load_config(CONFIGS / "topic.yaml")


@pytest.fixture(scope="session")
def topic_ablation(topic_cfg):
    """The full ablation at default settings, built once in memory."""
    return ablate(topic_cfg, art=Artifacts(topic_cfg))


@pytest.fixture(scope="session")
def topic_art(topic_ablation):
    return topic_ablation.artifacts


@pytest.fixture(scope="session")
def sentiment_run(topic_cfg, topic_art):
    """Sentiment RLDAF run reusing the topic run's pretrained model and prefix."""
    cfg = load_config(CONFIGS / "sentiment.yaml")
    assert pretrain_key(cfg) == pretrain_key(topic_cfg)
    assert prefix_key(cfg) == prefix_key(topic_cfg)
    art = Artifacts(cfg, lm=topic_art.lm, prefix=topic_art.prefix)
    art.adapted_for(cfg)
    return cfg, art, art.logs[rldaf_key(cfg)]
