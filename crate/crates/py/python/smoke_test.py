"""Smoke test for the milliseg extension module.

Build and install first:
    pip install --no-build-isolation ./crates/py
then run:
    python crates/py/python/smoke_test.py
"""

import math
import pathlib
import tempfile

import milliseg


def check_frame_roundtrip(tmp):
    pts = [[float(i), 0.0, 0.0] for i in range(6)]
    feats = [float(i % 3) for i in range(12)]
    f = milliseg.Frame("f0", "s0", pts, feats, 2, [0, 0, 1, 1, 2, 2])
    path = tmp / "f0.mlnf"
    f.save(str(path))
    g = milliseg.Frame.load(str(path))
    assert len(g) == 6 and g.dim == 2
    assert g.labels == [0, 0, 1, 1, 2, 2]
    assert g.features == f.features


def check_primitives():
    assert math.isclose(milliseg.cosine_similarity([1.0, 0.0], [1.0, 0.0]), 1.0)
    kept = milliseg.prune_sequence([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 0.95)
    assert kept == [0, 2], kept
    assert milliseg.budget_to_k(1000, 8, 0.01, 10) == 80
    scores = milliseg.diversity_scores([("a", [1.0, 0.0, 0.0, 1.0], 2), ("b", [1.0, 1.0, 0.0, 1.0], 2)])
    assert len(scores) == 2
    assert milliseg.select_frames([("a", 0.1), ("b", 0.3)], 1) == ["b"]
    assign, centers, obj = milliseg.kmeans([0.0, 0.1, 10.0, 10.1], 1, 2, 0)
    assert assign[0] == assign[1] != assign[2] == assign[3]
    assert obj >= 0.0 and len(centers) == 2
    p = milliseg.softmax([0.0, 0.0, 1.0, 1.0], 2, 1.0)
    assert all(math.isclose(x, 0.5) for x in p)
    assert milliseg.kl_distill([0.0, 1.0], [0.0, 1.0], 2, 2.0) < 1e-12
    assert milliseg.lovasz_softmax([1.0, 0.0, 0.0, 1.0], 2, [0, 1]) < 1e-12
    loss, grad = milliseg.supervised_loss([2.0, -2.0], 2, [0])
    assert loss > 0.0 and len(grad) == 2
    assert milliseg.ema_update([1.0], [0.0], 0.9) == [0.9]
    per_class, avg = milliseg.classwise_accuracy([0, 1, 1], [0, 1, 0], 3)
    assert per_class[2] is None and math.isclose(avg, 0.75)
    assert math.isclose(milliseg.miou([0, 1], [0, 1], 2), 1.0)
    try:
        milliseg.budget_to_k(10, 2, 2.0)
    except milliseg.ConfigError:
        pass
    else:
        raise AssertionError("alpha > 1 accepted")


def check_annotation(tmp):
    manifest, _ = milliseg.gen_synthetic(str(tmp / "data"), points_per_frame=500, frames=2, feature_dim=8, seed=1)
    f = milliseg.Frame.load(str(pathlib.Path(manifest).parent / "s00" / "s00_000000.mlnf"))
    c = milliseg.cluster_frame(f, 8, 0.05, seed=3)
    assert c.k == 80 and len(c) == len(f)
    labels = milliseg.annotate_oracle(f, c, 8)
    assert labels.clicked == c.k
    assert milliseg.UNLABELED not in labels.labels
    per_class, avg = milliseg.classwise_accuracy(labels.labels, f.labels, 8)
    assert avg > 0.9, avg


def check_pipeline(tmp):
    manifest, validation = milliseg.gen_synthetic(
        str(tmp / "data2"), points_per_frame=400, frames=4, sequences=2, feature_dim=8,
        drift=3.0, validation_frames=1, seed=2,
    )
    cfg = tmp / "run.toml"
    cfg.write_text(
        f'manifest = "{manifest}"\nvalidation_manifest = "{validation}"\nout_dir = "{tmp / "run"}"\n'
        "tau = 1.0\nalpha = 0.05\nseed = 7\n\n[semisup]\nstage1_epochs = 2\nstage2_epochs = 1\n"
    )
    report = milliseg.run_pipeline(str(cfg))
    assert "stage2_miou" in report
    assert milliseg.annotation_accuracy(str(tmp / "run"))
    seconds = milliseg.run_stage(str(cfg), "eval")
    assert seconds >= 0.0
    try:
        milliseg.run_stage(str(cfg), "nope")
    except milliseg.ConfigError:
        pass
    else:
        raise AssertionError("unknown stage accepted")


def main():
    with tempfile.TemporaryDirectory() as d:
        tmp = pathlib.Path(d)
        check_frame_roundtrip(tmp)
        check_primitives()
        check_annotation(tmp)
        check_pipeline(tmp)
    print("smoke test ok")


if __name__ == "__main__":
    main()
