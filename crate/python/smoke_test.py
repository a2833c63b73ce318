"""Smoke test of the iagan Python extension.

Build and install the extension first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/iagan-*.whl
"""

import math
import tempfile

import iagan


def test_phantoms_are_seeded_and_bounded():
    a = iagan.phantom("covid_like", 16, seed=3)
    b = iagan.phantom("covid_like", 16, seed=3)
    assert a == b
    assert len(a) == 16 and all(len(row) == 16 for row in a)
    assert all(-1.0 <= v <= 1.0 for row in a for v in row)
    assert iagan.phantom("normal", 16, seed=4) != iagan.phantom("normal", 16, seed=5)


def test_statistics():
    scores = [0.1, 0.4, 0.35, 0.8]
    labels = [False, False, True, True]
    assert iagan.auc(scores, labels) == 0.75
    roc = iagan.roc_curve(scores, labels)
    assert roc[-1][0] == math.inf
    same = iagan.delong_test(scores + [0.2, 0.9], scores + [0.2, 0.9], labels + [False, True])
    assert same.p_value == 1.0 and same.z == 0.0
    threshold, sens, spec, acc, feasible = iagan.operating_point(scores, labels)
    assert 0.0 <= acc <= 1.0 and isinstance(feasible, bool)


def test_plan_counts():
    inputs = [("pneumonia_like", f"p{i}") for i in range(10)] + [("normal", f"n{i}") for i in range(5)]
    assert iagan.plan_counts("iagan", "pneumonia_like", inputs, 2) == (10, 30, 40)
    assert iagan.plan_counts("iagan", "pneumonia_like", inputs, 2, table_arithmetic=True) == (15, 30, 45)
    assert iagan.plan_counts("dcgan", "pneumonia_like", inputs, 3) == (10, 30, 40)
    assert iagan.plan_counts("none", "pneumonia_like", inputs, 0) == (10, 0, 10)


def test_gan_train_generate_score_roundtrip():
    images = [iagan.phantom("normal", 16, seed=s) for s in range(8)]
    gan = iagan.Gan("normal", "dcgan", size=16, z_dim=8, seed=1)
    losses = gan.train(images, steps=3, batch_size=4)
    assert len(losses) == 3 and all(math.isfinite(d) and math.isfinite(g) for d, g in losses)
    fake = gan.generate(gan.sample_z(2, seed=0))
    assert len(fake) == 2 and len(fake[0]) == 16
    result = gan.score(images[0], iterations=5, seed=2)
    assert len(result.trajectory) == 5 and len(result.z) == 8
    best = result.best_so_far()
    assert all(x >= y for x, y in zip(best, best[1:]))
    with tempfile.TemporaryDirectory() as d:
        gan.save(d)
        again = iagan.Gan.load(d)
        assert again.name == "normal"
        assert again.score(images[0], iterations=5, seed=2).score == result.score


def test_bad_input_raises():
    for call in (lambda: iagan.phantom("unknown", 16), lambda: iagan.auc([1.0], [True, False])):
        try:
            call()
        except ValueError:
            continue
        raise AssertionError("expected ValueError")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
