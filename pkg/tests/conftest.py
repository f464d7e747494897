import numpy as np
import pytest

from hpgmn.datasets import make_reference_dataset
from hpgmn.graph import generate_heterophilous_sbm, random_splits
from hpgmn.local_stats import (StatMasks, assemble_local_statistics,
                               fit_pseudo_label_estimator, ppr_diffusion)
from hpgmn.nn import TrainConfig


@pytest.fixture(scope="session")
def texas_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "texas"
    make_reference_dataset("texas", out, seed=0)
    return out


@pytest.fixture(scope="session")
def sbm_graph():
    return generate_heterophilous_sbm(40, 3, 0.01, 0.15, 3.0, seed=7)


@pytest.fixture(scope="session")
def sbm_bundle(sbm_graph):
    """Graph + splits + pseudo-labels + full statistics, computed once."""
    g = sbm_graph
    splits = random_splits(g, n_splits=3, seed=1)
    cfg = TrainConfig(max_epochs=150, patience=30, seed=3)
    pl = fit_pseudo_label_estimator(g, splits[0], cfg, hidden=64)
    diffusion = ppr_diffusion(g, 0.15, 16)
    stats = assemble_local_statistics(g, pl, diffusion, StatMasks())
    return g, splits, pl, diffusion, stats


def random_block_stats(rng, n, num_classes=3, width=7):
    """Random statistics shaped like the real blocks (all non-negative)."""
    blocks = {
        "attributes": (rng.random((n, width)) < 0.3).astype(float),
        "class_dist": rng.poisson(3.0, (n, num_classes)).astype(float),
        "feature_dist": rng.random((n, num_classes * width)) * 0.5,
        "diffusion": rng.dirichlet(np.ones(n), size=n),
    }
    from hpgmn.local_stats import LocalStatistics
    return LocalStatistics(masks=StatMasks(), blocks=blocks)
