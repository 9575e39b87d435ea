import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcbm import datagen, metrics
from mcbm.datagen import ConfigError, FactorSpec, GenerativeConfig


@pytest.fixture(scope="module")
def factor_ds():
    return datagen.make_factor_dataset(datagen.default_factor_config(), seed=0)


def _cells_onehot(ds, names):
    """One-hot of the discretised cells of the named factors (oracle features)."""
    specs = {s.name: s for s in ds.concept_specs}
    specs.update(ds.nuisance_specs)
    values = {s.name: c for s, c in zip(ds.concept_specs, ds.concepts)}
    values.update(ds.nuisances)
    cols = [np.eye(specs[n].n_codes)[specs[n].codes(values[n])] for n in names]
    return np.concatenate(cols, axis=1)


def _probe_acc(x, y, k, seed=0):
    tr, ev = metrics.holdout_split(len(y), 0.7, seed)
    cfg = metrics.ProbeConfig(hidden_layers=(32,), epochs=40, lr=1e-2, batch_size=64, seed=seed)
    net = metrics.fit_classifier(x[tr], y[tr], k, cfg)
    return metrics.probe_accuracy(net, x[ev], y[ev])


def test_default_config_shape(factor_ds):
    assert factor_ds.x.shape == (8000, 32)
    assert [s.kind for s in factor_ds.concept_specs] == ["binary", "multiclass", "continuous"]
    assert factor_ds.nuisance_names("task_nuisance") == ["n_task"]
    assert factor_ds.nuisance_names("free_nuisance") == ["n_free"]
    cont = factor_ds.concepts[2]
    assert cont.min() >= -1 and cont.max() <= 1


def test_y_is_function_of_cells(factor_ds):
    table = factor_ds.meta["label_table"]
    cells = _cells_onehot(factor_ds, ["c_bin", "c_multi", "c_cont", "n_task"])
    assert cells.shape[1] == sum(table.shape)
    specs = factor_ds.concept_specs + [factor_ds.nuisance_specs["n_task"]]
    vals = factor_ds.concepts + [factor_ds.nuisances["n_task"]]
    idx = tuple(s.codes(v) for s, v in zip(specs, vals))
    assert np.array_equal(table[idx], factor_ds.y)


def test_without_task_nuisance_c_determines_y():
    cfg = datagen.default_factor_config()
    factors = tuple(f for f in cfg.factors if f.role != "task_nuisance")
    ds = datagen.make_factor_dataset(GenerativeConfig(factors=factors, n_samples=3000), seed=1)
    x = _cells_onehot(ds, ["c_bin", "c_multi", "c_cont"])
    assert _probe_acc(x, ds.y, ds.n_classes) >= 0.99
    assert ds.meta["bayes_accuracy_c"] == 1.0


def test_task_nuisance_makes_c_insufficient(factor_ds):
    x_c = _cells_onehot(factor_ds, ["c_bin", "c_multi", "c_cont"])
    x_cn = _cells_onehot(factor_ds, ["c_bin", "c_multi", "c_cont", "n_task"])
    acc_c = _probe_acc(x_c, factor_ds.y, 4)
    acc_cn = _probe_acc(x_cn, factor_ds.y, 4)
    assert acc_cn - acc_c >= 0.05


def test_some_concept_cell_has_two_labels(factor_ds):
    table = factor_ds.meta["label_table"]
    n_concept_axes = len(factor_ds.concept_specs)
    flat = table.reshape(int(np.prod(table.shape[:n_concept_axes])), -1)
    assert any(len(np.unique(row)) >= 2 for row in flat)
    assert factor_ds.meta["bayes_accuracy_c"] < 1.0


def test_bayes_accuracy_oracle():
    # brute force: per concept cell, majority label frequency over nuisance cells
    table = np.array([[0, 0, 1, 2], [3, 3, 3, 3]])
    assert datagen.bayes_accuracy(table, 1, 4) == pytest.approx((0.5 + 1.0) / 2)


def test_label_table_surjective():
    cfg = datagen.default_factor_config()
    assert set(np.unique(datagen.make_label_table(cfg))) == set(range(cfg.n_classes))


def test_free_nuisance_does_not_enter_y(factor_ds):
    # rebuild y with n_free permuted: the label lookup ignores it
    table = factor_ds.meta["label_table"]
    specs = factor_ds.concept_specs + [factor_ds.nuisance_specs["n_task"]]
    vals = factor_ds.concepts + [factor_ds.nuisances["n_task"]]
    perm = np.random.default_rng(0).permutation(len(factor_ds))
    assert table.ndim == len(specs)
    y_perm = table[tuple(s.codes(v) for s, v in zip(specs, vals))]
    assert np.array_equal(y_perm, factor_ds.y)
    assert not np.array_equal(factor_ds.nuisances["n_free"], factor_ds.nuisances["n_free"][perm])


def test_free_nuisance_urr_of_y_is_zero(factor_ds):
    # leakage estimator on (c -> n_free) vs (c, y -> n_free): y carries nothing about n_free
    sub = factor_ds.subset(np.arange(3000))
    y_onehot = np.eye(4)[sub.y]
    res = metrics.urr(y_onehot, sub.concept_matrix(), sub.nuisances["n_free"])
    assert res["urr"] < 0.02


def test_regeneration_bit_identical():
    cfg = datagen.default_factor_config(n_samples=500)
    a = datagen.make_factor_dataset(cfg, seed=3)
    b = datagen.make_factor_dataset(cfg, seed=3)
    assert a.x.tobytes() == b.x.tobytes()
    assert np.array_equal(a.y, b.y)
    c = datagen.make_factor_dataset(cfg, seed=4)
    assert not np.array_equal(a.x, c.x)


def test_config_errors():
    with pytest.raises(ConfigError):
        GenerativeConfig(factors=(FactorSpec("n", "binary", role="free_nuisance"),))
    with pytest.raises(ConfigError):
        datagen.default_factor_config(n_samples=0)
    with pytest.raises(ConfigError):
        FactorSpec("m", "multiclass", k=1)
    with pytest.raises(ConfigError):
        datagen.default_factor_config(input_dim=3)


def test_config_roundtrip():
    cfg = datagen.default_factor_config()
    assert GenerativeConfig.from_dict(cfg.to_dict()) == cfg


# -- spiral ------------------------------------------------------------------------------


def test_spiral_counts_exact():
    ds = datagen.make_spiral_dataset(counts=(2000, 200, 200, 200), seed=0)
    assert np.bincount(ds.y).tolist() == [2000, 200, 200, 200]
    assert np.array_equal(ds.concepts[0], ds.y)
    assert ds.concept_specs[0].kind == "multiclass" and ds.concept_specs[0].k == 4


def test_spiral_noise_free_on_arm():
    ds = datagen.make_spiral_dataset(counts=(50, 60, 70, 80), noise_std=0.0, seed=1)
    t = np.linalg.norm(ds.x, axis=1)  # arm radius equals the curve parameter
    for k in range(4):
        sel = ds.y == k
        assert np.allclose(ds.x[sel], datagen.spiral_arm(k, t[sel]), atol=1e-12)


def test_spiral_balanced_probe_accuracy():
    ds = datagen.make_spiral_dataset(counts=(100, 100, 100, 100), noise_std=0.02, seed=0)
    tr, ev = metrics.holdout_split(len(ds), 0.75, 0)
    cfg = metrics.ProbeConfig(hidden_layers=(64, 64), epochs=500, lr=3e-3, batch_size=32, seed=0)
    net = metrics.fit_classifier(ds.x[tr], ds.y[tr], 4, cfg)
    assert metrics.probe_accuracy(net, ds.x[ev], ds.y[ev]) >= 0.97


# -- bimodal prior ----------------------------------------------------------------------------


def test_bimodal_single_component():
    s = datagen.make_bimodal_prior([1.0, 0.0], [0.0, 5.0], [1.0, 1.0], 10_000, seed=0)
    assert abs(s.mean()) < 0.05
    assert s.max() < 5.0


def test_bimodal_moments():
    s = datagen.make_bimodal_prior([0.5, 0.5], [-3.0, 3.0], [1.0, 1.0], 10_000, seed=0)
    assert abs(s.mean()) < 0.05
    # mixture variance: sum w (s^2 + m^2) - mean^2 = 1 + 9
    assert abs(s.var() - 10.0) < 0.3


def test_bimodal_invalid():
    with pytest.raises(ConfigError):
        datagen.make_bimodal_prior([0.7, 0.7], [0, 1], [1, 1], 10)
    with pytest.raises(ConfigError):
        datagen.make_bimodal_prior([0.5, 0.5], [0, 1], [1, -1], 10)


# -- split ------------------------------------------------------------------------------


def test_split_sizes_and_identity():
    ds = datagen.make_factor_dataset(datagen.default_factor_config(n_samples=1000), seed=0)
    tr, va, te = datagen.split(ds, (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (800, 100, 100)
    assert (tr.split_tag, va.split_tag, te.split_tag) == ("train", "val", "test")
    whole, _, _ = datagen.split(ds, (1.0, 0.0, 0.0), seed=0)
    assert np.array_equal(whole.x, ds.x) and np.array_equal(whole.y, ds.y)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(40, 400),
    r=st.tuples(st.floats(0.1, 1.0), st.floats(0.1, 1.0), st.floats(0.1, 1.0)),
    seed=st.integers(0, 1000),
)
def test_split_stratified_and_disjoint(n, r, seed):
    ratios = np.array(r) / sum(r)
    ds = datagen.make_factor_dataset(datagen.default_factor_config(n_samples=n), seed=seed % 7)
    ds.meta["row"] = None
    ids = np.arange(n, dtype=np.float64)
    ds.x = np.column_stack([ds.x[:, :-1], ids])  # tag rows to check disjointness
    parts = datagen.split(ds, ratios, seed=seed)
    seen = np.concatenate([p.x[:, -1] for p in parts])
    assert np.array_equal(np.sort(seen), ids)
    for p, ratio in zip(parts, ratios):
        for k in range(ds.n_classes):
            expected = ratio * np.sum(ds.y == k)
            assert abs(np.sum(p.y == k) - expected) <= 1.0 + 1e-9


def test_split_warns_on_empty_class():
    ds = datagen.make_spiral_dataset(counts=(20, 2, 2, 2), seed=0)
    parts = datagen.split(ds, (0.8, 0.1, 0.1), seed=0)
    assert any(p.meta.get("split_warnings") for p in parts)


def test_csv_roundtrip_lossless(tmp_path):
    ds = datagen.make_factor_dataset(datagen.default_factor_config(n_samples=300), seed=2)
    path, side = datagen.save_dataset_csv(ds, tmp_path / "d.csv")
    assert side.exists()
    back = datagen.load_dataset_csv(path)
    assert back.x.tobytes() == ds.x.tobytes()
    assert np.array_equal(back.y, ds.y)
    for a, b in zip(back.concepts, ds.concepts):
        assert a.tobytes() == b.astype(a.dtype).tobytes()
    assert np.array_equal(back.meta["label_table"], ds.meta["label_table"])
    assert back.concept_specs == ds.concept_specs
