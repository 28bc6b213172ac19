import pytest

import ttalign as tl
from ttalign import harness
from ttalign.tta import GRADCHECK_CONFIG

# Small-scale pipeline shared across test modules. "tiny" is a 16x16 /
# 3-class / d=16 model that pretrains in under a second.

TINY_GEN = harness.GenConfig(
    n_source=96,
    n_test=48,
    image_size=16,
    class_names=GRADCHECK_CONFIG.class_names,
    noise_sigma=0.25,
    shift=harness.ShiftSpec("mean-offset", 0.6),
)


@pytest.fixture(scope="session")
def tiny_data():
    source, test = harness.gen_synthetic(TINY_GEN, seed=0)
    val = harness.gen_source_val(TINY_GEN, seed=0)
    return source, val, test


@pytest.fixture(scope="session")
def tiny_model(tiny_data):
    source = tiny_data[0]
    model = tl.DualEncoder(GRADCHECK_CONFIG, seed=1)
    tl.pretrain_backbone(
        model, source.images, source.labels, epochs=10, seed=0, lr=1e-3, batch_size=32
    )
    return model


@pytest.fixture(scope="session")
def tiny_stats(tiny_model, tiny_data):
    source = tiny_data[0]
    return tl.source_stats(
        source.images, tiny_model, max_order=5, dataset_id="tiny-source"
    )
