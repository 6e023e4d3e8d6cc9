"""Smoke test for the sppdense_py extension module."""

import math
import sys
import tempfile

import sppdense_py as sp


def main():
    x = sp.Tensor.randn([2, 2, 32, 32], seed=1)
    assert x.shape == [2, 2, 32, 32]
    assert len(x) == 2 * 2 * 32 * 32
    assert sp.Tensor.from_bytes(x.to_bytes()).tolist() == x.tolist()

    pooled = sp.spp(sp.Tensor.randn([1, 3, 13, 9], seed=2))
    assert pooled.shape == [1, 21 * 3]

    model = sp.Model("densenet", input_size=32, seed=0)
    assert model.label == "DenseNet + SE Block + SPPLayer"
    base = sp.Model("densenet", use_se=False, input_size=32, seed=0)
    assert model.count_params() > base.count_params()
    p = model.predict_proba(x)
    assert len(p) == 2 and all(0.0 < v < 1.0 for v in p)
    logits = model.logits(x)
    assert all(abs(1 / (1 + math.exp(-z)) - q) < 1e-5 for z, q in zip(logits, p))

    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        again = sp.Model.load(d)
        assert again.predict_proba(x) == p

    try:
        model.predict_proba(sp.Tensor.randn([1, 1, 32, 32]))
    except ValueError as e:
        assert "modality" in str(e)
    else:
        raise AssertionError("single-channel input accepted by a two-channel model")

    assert sp.auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75
    points, thresholds = sp.roc([0.1, 0.4, 0.35, 0.8], [False, False, True, True])
    assert points[0] == (0.0, 0.0) and points[-1] == (1.0, 1.0)
    assert math.isinf(thresholds[0])
    m = sp.metrics(86, 4, 96, 14)
    assert round(m["sensitivity"], 2) == 0.86 and round(m["specificity"], 2) == 0.96

    cohort = sp.generate_cohort(n_resistant=3, n_sensitive=5, image_size=16, seed=4)
    assert [c[1] for c in cohort].count("resistant") == 3
    assert cohort == sp.generate_cohort(n_resistant=3, n_sensitive=5, image_size=16, seed=4)

    assert sp.run_cli(["train", "--folds", "1"]) == 1

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
