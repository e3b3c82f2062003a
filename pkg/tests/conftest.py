import numpy as np
import pytest

from metadescent.task_gen import MetaConfig, RngStream, sample_task_batch, sample_truths, w0_uniform
from metadescent.maml_core import build_meta_system


def make_cfg(**kw) -> MetaConfig:
    base = dict(p=40, s=5, m=4, n_t=12, n_v=3, sigma=0.5, alpha_t=0.01, w0_s=w0_uniform(10.0, 5), nu=2.0)
    if "s" in kw and "w0_s" not in kw:
        base["w0_s"] = w0_uniform(10.0, kw["s"])
    base.update(kw)
    if "w0_norm_sq" in base:
        base["w0_s"] = w0_uniform(base.pop("w0_norm_sq"), base["s"])
    return MetaConfig(**base)


def make_system(cfg: MetaConfig, seed: int = 0, rep: int = 0):
    rng = RngStream(seed).child(rep)
    truths, _ = sample_truths(cfg, rng)
    batch = sample_task_batch(cfg, truths, rng)
    return batch, build_meta_system(batch, cfg)


@pytest.fixture
def cfg():
    return make_cfg()


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
