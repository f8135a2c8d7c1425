"""Finite-difference checks for every analytic backward pass.

The exhaustive twenty-instance sweep runs in the acceptance suite; this
module keeps a lighter per-layer sweep for quick iteration plus the
full-graph sanity pass.
"""

import numpy as np
import pytest

from gradcheck_lib import LAYER_CHECKS
from tdntc import models
from tdntc.layers import softmax_cross_entropy_batch

TOLERANCE = 1e-4


@pytest.mark.parametrize("layer_name", sorted(LAYER_CHECKS))
def test_layer_backward_matches_finite_differences(layer_name):
    check = LAYER_CHECKS[layer_name]
    for i in range(6):
        rng = np.random.default_rng(7000 + 13 * i)
        err = check(rng)
        assert err < TOLERANCE, f"{layer_name} instance {i}: rel err {err:.3e}"


@pytest.mark.parametrize("variant", models.VARIANTS)
def test_full_graph_backward_produces_gradients_for_every_parameter(variant):
    cfg = models.ModelConfig(variant, 12, 3, units=4, kernel=(3, 2), td_units=4, seed=5)
    graph = models.build_model(cfg)
    rng = np.random.default_rng(1)
    if cfg.frame_input:
        x = rng.uniform(0, 1, size=(4, *graph.frame_dims))
    else:
        x = rng.uniform(0, 1, size=(4, 12))
    y = np.array([0, 1, 2, 0])
    logits = graph.forward_logits(x, train=True)
    _, _, dlogits = softmax_cross_entropy_batch(logits, y)
    graph.backward(dlogits / 4)
    params = graph.params()
    grads = graph.grads()
    assert set(params) == set(grads)
    for name, arr in params.items():
        assert grads[name].shape == arr.shape
        assert np.isfinite(grads[name]).all(), name
