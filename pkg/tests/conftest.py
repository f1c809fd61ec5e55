import sys
from pathlib import Path

import numpy as np
import pytest

from dsct import tensor as T
from dsct.data import FeatureBatch
from dsct.model import ModelConfig, build_model

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE / "oracles"))

FIXTURES = HERE / "fixtures"

# filled by tests/test_acceptance.py, echoed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def golden():
    return np.load(FIXTURES / "forward_golden.npz")


def pinned(golden, prefix: str) -> dict[str, np.ndarray]:
    """Parameters stored under ``prefix.`` in the golden archive."""
    out = {}
    for k in golden.files:
        if k.startswith(prefix + "."):
            out[k[len(prefix) + 1:]] = golden[k]
    return out


def load_pinned(module, golden, prefix: str):
    """Load pinned float64 parameters into ``module`` (names must match exactly)."""
    module.to(np.float64)
    own = dict(module.named_parameters())
    params = {k: v for k, v in pinned(golden, prefix).items() if k in own}
    assert set(params) == set(own), sorted(set(own) ^ set(params))[:5]
    for k, p in own.items():
        p.data = np.array(params[k], dtype=np.float64)
    return module


def micro_config(**kw) -> ModelConfig:
    base = dict(vocab_size=10, d_model=8, heads=2, enc_layers=1, dec_layers=1, d_ff=16, max_len=8,
                feature_dim_region=6, feature_dim_seg=6, keep_prob=1.0, beam=2)
    base.update(kw)
    return ModelConfig(**base)


def micro_model(seed=0, dtype=np.float64, **kw):
    return build_model(micro_config(**kw), seed).to(dtype)


def random_feats(rng, cfg: ModelConfig, batch=1, n_r=3, n_s=4, dtype=np.float64) -> FeatureBatch:
    region = rng.normal(size=(batch, n_r, cfg.feature_dim_region)).astype(dtype)
    seg = rng.normal(size=(batch, n_s, cfg.feature_dim_seg)).astype(dtype)
    return FeatureBatch(region, np.ones((batch, n_r), bool), seg, np.ones((batch, n_s), bool))


@pytest.fixture
def rng():
    return T.make_rng(12345, "tests")
