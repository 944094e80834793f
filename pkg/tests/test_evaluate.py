import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advlab import evaluate as E
from advlab.data import Dataset
from advlab.errors import ConfigError, DimensionError
from advlab.evaluate import EvalReport, ReportRow
from advlab.nn import AutoencoderSpec, ClassifierSpec, build_autoencoder, build_classifier

TINY = ClassifierSpec(input_shape=(1, 16, 16), block_channels=(2, 3, 3, 4), hidden_dims=(8, 8))
TINY_AE = AutoencoderSpec(input_shape=(1, 16, 16), conv_channels=(2, 3, 2), latent_dim=3, hidden_dim=4)


def _balanced(n, seed=0, size=16):
    r = np.random.default_rng(seed)
    return Dataset(r.random((n, 1, size, size), dtype=np.float32), np.arange(n) % 10, "test")


class OneHotOracle:
    """Reads the label hidden in the first pixel and returns its one-hot vector."""

    def __call__(self, x):
        labels = np.rint(x[:, 0, 0, 0] * 9).astype(int)
        return np.eye(10)[labels]


def test_oracle_model_perfect():
    ds = _balanced(50)
    ds.images[:, 0, 0, 0] = ds.labels / 9
    acc, secs = E.accuracy(OneHotOracle(), ds, batch_size=7)
    assert acc == 1.0 and secs == 0.0


def test_constant_logits_chance():
    ds = _balanced(1000)
    acc, _ = E.accuracy(lambda x: np.tile(np.arange(10.0), (len(x), 1)), ds)
    assert abs(acc - 0.1) <= 0.02


def test_accuracy_matches_counting_oracle():
    model = build_classifier(TINY, np.random.default_rng(0))
    ds = _balanced(230, seed=1)
    acc, _ = E.accuracy(model, ds, batch_size=64)
    correct = sum(int(model.predict(ds.images[i : i + 1])[0].argmax() == ds.labels[i]) for i in range(len(ds)))
    assert acc == correct / len(ds)


def test_defense_timing_and_shape():
    clf = build_classifier(TINY, np.random.default_rng(0))
    ae = build_autoencoder(TINY_AE, np.random.default_rng(0))
    ds = _balanced(40)
    acc, secs = E.accuracy(clf, ds, ae, batch_size=16)
    assert 0 <= acc <= 1 and secs > 0 and math.isfinite(secs)
    with pytest.raises(DimensionError):
        E.accuracy(clf, ds, lambda x: x[:, :, :8, :8])


def test_degenerate_sweep_is_plain_accuracy():
    clf = build_classifier(TINY, np.random.default_rng(0))
    ds = _balanced(30)
    rep = E.sweep(clf, None, ds, "fgsm", [0.0])
    assert len(rep.rows) == 1
    row = rep.rows[0]
    assert (row.family, row.epsilon, row.defended, row.n) == ("fgsm", 0.0, False, 30)
    assert row.accuracy == E.accuracy(clf, ds)[0]


@pytest.fixture(scope="module")
def pair():
    return build_classifier(TINY, np.random.default_rng(0)), build_autoencoder(TINY_AE, np.random.default_rng(1))


@pytest.fixture(scope="module")
def fgsm_report(pair):
    clf, ae = pair
    return E.sweep(clf, ae, _balanced(20), "fgsm", E.parse_grid("0:1.0:0.1"), keep_sets=True)


def test_sweep_row_counts(fgsm_report):
    assert len(fgsm_report.select(defended=False)) == 11
    assert len(fgsm_report.select(defended=True)) == 11
    assert [r.epsilon for r in fgsm_report.select(defended=False)] == [round(0.1 * k, 1) for k in range(11)]


def test_sweep_eps_zero_uses_clean_images(fgsm_report):
    assert np.array_equal(fgsm_report.sets[0.0].adversarial, _balanced(20).images)
    undefended = fgsm_report.accuracy_at("fgsm", 0.0, False)
    assert undefended == E.accuracy(build_classifier(TINY, np.random.default_rng(0)), _balanced(20))[0]


def test_sweep_latency_rows(fgsm_report):
    for r in fgsm_report.rows:
        assert r.mean_defense_s >= 0 and math.isfinite(r.mean_defense_s)
        assert (r.mean_defense_s > 0) == r.defended


def test_sweep_deterministic(pair):
    clf, ae = pair
    kw = dict(steps=2, alpha=0.05, seed=3)
    a = E.sweep(clf, ae, _balanced(20), "pgd", [0.0, 0.1], **kw)
    b = E.sweep(clf, ae, _balanced(20), "pgd", [0.0, 0.1], **kw)
    assert [(r.key(), r.accuracy) for r in a.rows] == [(r.key(), r.accuracy) for r in b.rows]
    c = E.sweep(clf, ae, _balanced(20), "pgd", [0.0, 0.1], threads=2, **kw)
    assert [(r.key(), r.accuracy) for r in a.rows] == [(r.key(), r.accuracy) for r in c.rows]
    assert a.metadata["classifier"] == clf.fingerprint() and a.metadata["defense"] == ae.fingerprint()


def test_sweep_rejects_unsorted(pair):
    with pytest.raises(ConfigError):
        E.sweep(pair[0], None, _balanced(5), "fgsm", [0.2, 0.1])
    with pytest.raises(ConfigError):
        E.sweep(pair[0], None, _balanced(5), "fgsm", [-0.1])


def test_parse_grid():
    assert E.parse_grid("0:0.4:0.05") == [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4]
    assert E.parse_grid("0.1, 0.3,0.5") == [0.1, 0.3, 0.5]
    for bad in ("0:1", "1:0:0.1", "0:1:0", "0.3,0.1", ""):
        with pytest.raises(ConfigError):
            E.parse_grid(bad)


def test_report_round_trip(tmp_path, fgsm_report):
    path = E.write_report(fgsm_report, tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "family,epsilon,defended,accuracy,mean_defense_s,n"
    assert len(lines) == 23
    back = E.read_report(path)
    assert back.rows == fgsm_report.rows
    assert back.metadata == fgsm_report.metadata


@settings(max_examples=30, deadline=None)
@given(
    st.lists(
        st.tuples(st.floats(0, 1), st.booleans(), st.integers(0, 500), st.floats(0, 1e-2)),
        min_size=1,
        max_size=12,
        unique_by=lambda t: (t[0], t[1]),
    )
)
def test_report_round_trip_property(tmp_path_factory, rows):
    rep = EvalReport()
    for eps, dfd, k, secs in rows:
        rep.add(ReportRow("pgd", eps, dfd, k / 500, secs if dfd else 0.0, 500))
    path = E.write_report(rep, tmp_path_factory.mktemp("r") / "r.csv", metadata=False)
    assert E.read_report(path).rows == rep.rows


def test_report_rejects_duplicates_and_bad_header(tmp_path):
    rep = EvalReport([ReportRow("fgsm", 0.1, False, 0.5, 0.0, 10)])
    with pytest.raises(ConfigError):
        rep.add(ReportRow("fgsm", 0.1, False, 0.6, 0.0, 10))
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(ConfigError):
        E.read_report(tmp_path / "bad.csv")
    with pytest.raises(ConfigError):
        E.write_report(EvalReport(), tmp_path / "empty.csv")


def test_curve_files(tmp_path, fgsm_report):
    paths = E.render_plots(fgsm_report, tmp_path)
    assert sorted(p.name for p in paths) == ["fgsm_defended.txt", "fgsm_undefended.txt"]
    pts = E.read_curve(tmp_path / "fgsm_undefended.txt")
    assert [round(e, 10) for e, _ in pts] == [round(0.1 * k, 10) for k in range(11)]
    assert [a for _, a in pts] == [r.accuracy for r in fgsm_report.select("fgsm", False)]


def test_tables(tmp_path, fgsm_report):
    paths = E.write_tables([fgsm_report], tmp_path)
    names = {p.name for p in paths}
    assert {"table1.csv", "table3.csv", "tables.txt"} <= names
    header = (tmp_path / "table3.csv").read_text().splitlines()[0]
    assert header == "epsilon,accuracy_mnist,defense_s_mnist"
    assert len((tmp_path / "table1.csv").read_text().splitlines()) == 12


def test_gallery_empty(tmp_path):
    x = np.zeros((3, 1, 4, 4))
    assert E.sample_gallery(x, x, x, tmp_path / "g", 0) == []
    assert not (tmp_path / "g").exists()


def test_quantization_contract():
    vals = np.array([-0.5, 0.0, 0.5, 1 / 255, 0.49 / 255, 0.51 / 255, 1.0, 2.0])
    assert E.to_bytes(vals).tolist() == [0, 0, 128, 1, 0, 1, 255, 255]


def test_gallery_files(tmp_path):
    r = np.random.default_rng(0)
    clean, adv, rec = (r.random((5, 1, 8, 8)) for _ in range(3))
    paths = E.sample_gallery(clean, adv, rec, tmp_path, 2)
    assert [p.name for p in paths] == ["sample_000.pgm", "sample_001.pgm"]
    img = E.read_pgm(paths[1])
    assert img.shape == (8, 24)
    for panel, src in zip(E.split_gallery_image(img), (clean, adv, rec)):
        assert np.array_equal(panel, E.to_bytes(src[1, 0]))
    with pytest.raises(DimensionError):
        E.sample_gallery(clean, adv, rec[:2], tmp_path, 1)


def test_identity_autoencoder_gallery(tmp_path, identity_autoencoder):
    model, _, val = identity_autoencoder
    x = val.images[:8]
    rec = model.predict(x)
    paths = E.sample_gallery(x, x, rec, tmp_path, 8)
    per_panel = []
    for p in paths:
        clean, _, recon = E.split_gallery_image(E.read_pgm(p))
        per_panel.append(np.abs(clean.astype(float) - recon.astype(float)).mean() / 255)
    # per-pixel L1 averaged over the gallery; single dense digits sit slightly above 0.05
    assert np.mean(per_panel) < 0.05, per_panel
