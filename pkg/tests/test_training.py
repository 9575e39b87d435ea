import csv
import json

import numpy as np
import pytest

from mcbm import datagen, models, pipeline, training
from mcbm import diffcore as dc
from mcbm.diffcore import CheckpointError
from mcbm.models import ModelConfigError
from mcbm.training import TrainConfig


@pytest.fixture(scope="module")
def small_splits():
    ds = datagen.make_factor_dataset(datagen.default_factor_config(n_samples=600), seed=0)
    return datagen.split(ds, (0.8, 0.1, 0.1), seed=0)


def _model(variant, ds, seed=0, **kw):
    if variant == "MCBM":
        kw.setdefault("gamma", 1.0)
    return models.build_model(variant, ds.concept_specs, ds.input_dim, ds.n_classes, encoder_hidden=(16,), task_hidden=(16,), seed=seed, **kw)


def test_config_validation():
    with pytest.raises(ModelConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ModelConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ModelConfigError):
        TrainConfig(gamma=-1.0)
    with pytest.raises(ModelConfigError):
        TrainConfig.from_dict({"epochs": 3, "lr": 0.1})
    assert TrainConfig.from_dict({"epochs": 3}).epochs == 3


def test_vm_matches_plain_supervised_loop(small_splits):
    tr = small_splits[0]
    cfg = TrainConfig(epochs=2, batch_size=64, learning_rate=1e-2, master_seed=4)
    trained, _ = training.train(_model("VM", tr), tr, cfg)

    # reference: cross-entropy on task_head(encoder(x)) with the same batches
    ref = _model("VM", tr)
    params = list(ref.parameters().values())
    opt = dc.OptimizerState(kind="adam", learning_rate=1e-2)
    shuffle = dc.RngStreams(4)["train/shuffle"]
    for _ in range(2):
        order = shuffle.permutation(len(tr))
        for start in range(0, len(tr), 64):
            idx = order[start : start + 64]
            dc.zero_grad(params)
            dc.cross_entropy(ref.task_head(ref.encoder(dc.Tensor(tr.x[idx]))), tr.y[idx]).backward()
            opt.step(params)
    got = trained.parameters()
    for name, p in ref.parameters().items():
        assert np.array_equal(p.data, got[name].data), name

    parts = models.loss_total(trained, models.Batch.from_dataset(tr), None)
    assert parts.concept == [] and parts.kl == []
    assert parts.total.item() == parts.task.item()


def test_same_seed_reproduces_bitwise(small_splits):
    tr, va, _ = small_splits
    cfg = TrainConfig(epochs=3, batch_size=64, master_seed=11)
    a, ha = training.train(_model("MCBM", tr), tr, cfg, va)
    b, hb = training.train(_model("MCBM", tr), tr, cfg, va)
    assert ha.records == hb.records
    assert ha.records[-1]["val_task_accuracy"] == hb.records[-1]["val_task_accuracy"]
    for name, p in a.parameters().items():
        assert p.data.tobytes() == b.parameters()[name].data.tobytes()
    c, hc = training.train(_model("MCBM", tr), tr, TrainConfig(epochs=3, batch_size=64, master_seed=12), va)
    assert hc.records != ha.records


@pytest.mark.parametrize("variant", models.VARIANTS)
def test_loss_decreases_and_history_csv(variant, small_splits, tmp_path):
    tr, va, _ = small_splits
    model, hist = training.train(_model(variant, tr), tr, TrainConfig(epochs=6, batch_size=32, learning_rate=3e-3), va)
    assert len(hist) == 6
    assert [r["epoch"] for r in hist.records] == list(range(1, 7))
    if variant == "HCBM":
        # the two stages optimise different objectives; compare within each stage
        assert [r["stage"] for r in hist.records] == ["concepts"] * 3 + ["task"] * 3
        assert hist.records[2]["loss_total"] <= hist.records[0]["loss_total"]
        assert hist.records[5]["loss_total"] <= hist.records[3]["loss_total"]
    else:
        assert hist.records[-1]["loss_total"] <= hist.records[0]["loss_total"]
    assert all(np.isfinite(r["loss_total"]) for r in hist.records)
    path = hist.to_csv(tmp_path / "h.csv")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert float(rows[-1]["loss_total"]) == hist.records[-1]["loss_total"]


def test_hcbm_stage_freezing(small_splits):
    tr = small_splits[0]
    model = _model("HCBM", tr)
    head0 = {k: p.data.copy() for k, p in model.parameters(["task_head"]).items()}
    model, _ = training.train(model, tr, TrainConfig(epochs=1, batch_size=64))
    # a single epoch is all concept stage: the task head is untouched
    for k, v in head0.items():
        assert np.array_equal(model.parameters()[k].data, v)
    enc = {k: p.data.copy() for k, p in model.parameters(["encoder"]).items()}
    model2 = model.clone()
    stage = training._stages(model2, 2)
    assert [s[0] for s in stage] == ["concepts", "task"]
    assert stage[1][2] == ("task_head",)
    assert enc  # encoder exists and was trained in stage one
    assert not all(np.array_equal(enc[k], v) for k, v in {k: p.data for k, p in _model("HCBM", tr).parameters(["encoder"]).items()}.items())


def test_nan_loss_reports_batch_index(small_splits):
    tr = small_splits[0]
    bad = tr.subset(np.arange(len(tr)))
    bad.x = bad.x.copy()
    row = 37
    bad.x[row, 0] = np.nan
    cfg = TrainConfig(epochs=2, batch_size=32, master_seed=5)
    order = dc.RngStreams(5)["train/shuffle"].permutation(len(bad))
    expected = int(np.flatnonzero(order == row)[0]) // 32
    with pytest.raises(training.TrainingDivergedError) as info:
        training.train(_model("CBM", bad), bad, cfg)
    assert info.value.batch_index == expected
    assert info.value.epoch == 1
    assert f"batch {expected}" in str(info.value)


def test_gamma_on_cbm_rejected(small_splits):
    tr = small_splits[0]
    with pytest.raises(ModelConfigError):
        training.train(_model("CBM", tr), tr, TrainConfig(epochs=1, gamma=1.0))


def test_dimension_mismatch(small_splits):
    tr = small_splits[0]
    m = models.build_model("VM", tr.concept_specs, tr.input_dim + 1, 4)
    with pytest.raises(ModelConfigError):
        training.train(m, tr, TrainConfig(epochs=1))


# -- evaluation ------------------------------------------------------------------------


def test_memorising_model_scores_one():
    y = np.arange(8) % 4
    x = np.eye(8)
    ds = datagen.Dataset(x=x, y=y, concepts=[y.copy()], concept_specs=[datagen.FactorSpec("c", "multiclass", k=4)], n_classes=4)
    m = models.build_model("VM", ds.concept_specs, 8, 4, encoder_hidden=(), task_hidden=(), total_dim=4)
    w, b = m.encoder.layers[0]
    w.data[:] = np.eye(4)[y] * 10.0
    b.data[:] = 0.0
    tw, tb = m.task_head.layers[0]
    tw.data[:] = np.eye(4)
    tb.data[:] = 0.0
    assert training.evaluate(m, ds)["task_accuracy"] == 1.0


def test_random_head_near_chance():
    ds = datagen.make_spiral_dataset(counts=(500, 500, 500, 500), seed=3)
    ds.y = ds.y[np.random.default_rng(0).permutation(len(ds))]  # labels independent of inputs
    m = models.build_model("CBM", ds.concept_specs, 2, 4, seed=9)
    acc = training.evaluate(m, ds, with_losses=False)["task_accuracy"]
    assert abs(acc - 0.25) <= 0.03


def test_evaluate_consumes_no_rng(small_splits):
    tr, va, _ = small_splits
    model, _ = training.train(_model("MCBM", tr), tr, TrainConfig(epochs=1))
    state = np.random.get_state()[1].copy()
    a = training.evaluate(model, va)
    b = training.evaluate(model, va)
    assert np.array_equal(np.random.get_state()[1], state)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_concept_accuracy_scope(small_splits):
    tr = small_splits[0]
    ev = training.evaluate(_model("HCBM", tr), tr)
    # continuous-derived block reports sign accuracy and stays out of the mean
    assert ev["concept_accuracy"][-1] is None
    assert "sign_accuracy" in ev["continuous_concepts"][len(ev["concept_accuracy"]) - 1]
    ev = training.evaluate(_model("MCBM", tr), tr)
    assert set(ev["continuous_concepts"][2]) == {"mse", "r2"}
    assert ev["mean_concept_accuracy"] == pytest.approx(np.mean(ev["concept_accuracy"][:2]))


# -- checkpoints ------------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(small_splits, tmp_path):
    tr, va, _ = small_splits
    model, hist = training.train(_model("MCBM", tr), tr, TrainConfig(epochs=2), va)
    before = training.evaluate(model, va)
    path = training.save_checkpoint(model, hist, tmp_path / "m.json", master_seed=0, extras={"k": 1})
    back, hist2, extras = training.load_checkpoint(path, expected_variant="MCBM")
    assert json.dumps(training.evaluate(back, va), sort_keys=True) == json.dumps(before, sort_keys=True)
    assert hist2.records == json.loads(json.dumps(hist.records))
    assert extras == {"k": 1}
    for name, p in model.parameters().items():
        assert p.data.tobytes() == back.parameters()[name].data.tobytes()


def test_checkpoint_variant_mismatch(small_splits, tmp_path):
    tr = small_splits[0]
    path = training.save_checkpoint(_model("VM", tr), None, tmp_path / "vm.json")
    with pytest.raises(CheckpointError, match="VM"):
        training.load_checkpoint(path, expected_variant="MCBM")


def test_checkpoint_version_bump_refused(small_splits, tmp_path):
    tr = small_splits[0]
    path = training.save_checkpoint(_model("CBM", tr), None, tmp_path / "c.json")
    doc = json.loads(path.read_text())
    doc["state"]["header"]["format_version"] = dc.FORMAT_VERSION + 1
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="format_version"):
        training.load_checkpoint(path)


def test_checkpoint_corrupt_payload(small_splits, tmp_path):
    tr = small_splits[0]
    path = training.save_checkpoint(_model("CBM", tr), None, tmp_path / "c.json")
    path.write_text(path.read_text()[:-40])
    with pytest.raises(CheckpointError):
        training.load_checkpoint(path)
    doc_path = training.save_checkpoint(_model("CBM", tr), None, tmp_path / "d.json")
    doc = json.loads(doc_path.read_text())
    name = next(iter(doc["state"]["parameters"]))
    doc["state"]["parameters"][name]["values"] = "AAAA"
    doc_path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        training.load_checkpoint(doc_path)


# -- reference runs on the default factor dataset ------------------------------------------


@pytest.mark.slow
def test_mcbm_kl_below_golden_threshold(seed0_runs, golden):
    ref = golden("training_kl.json")
    for label in ref["reference"]:
        run = seed0_runs[label]
        kl = training.evaluate(run.model, run.splits[0])["losses"]["kl"]
        assert all(k < ref["threshold"] for k in kl), (label, kl)


@pytest.mark.slow
def test_concept_accuracy_of_trained_models(seed0_runs):
    for label, run in seed0_runs.items():
        ev = training.evaluate(run.model, run.splits[2], with_losses=False)
        if run.model.variant == "VM":
            continue
        assert ev["mean_concept_accuracy"] >= 0.99, label
        if label.startswith("MCBM"):
            assert ev["continuous_concepts"][2]["r2"] > 0.9


@pytest.mark.slow
def test_default_configs_loss_decreases(seed0_runs):
    for label, run in seed0_runs.items():
        recs = run.history.records
        if run.model.variant == "HCBM":
            task = [r for r in recs if r["stage"] == "task"]
            assert task[-1]["loss_total"] <= task[0]["loss_total"]
            recs = [r for r in recs if r["stage"] == "concepts"]
        assert recs[-1]["loss_total"] <= recs[0]["loss_total"], label


@pytest.mark.slow
def test_gamma_sweep_accuracy_non_increasing(seed0_runs):
    gamma0 = pipeline.GAMMA_LEVELS["medium"]
    cfg = pipeline.ExperimentConfig(seed=0)
    ref = seed0_runs["MCBM(medium)"]
    accs = []
    for g in (0.1 * gamma0, gamma0, 10 * gamma0):
        run = ref if g == gamma0 else pipeline.train_one(cfg, {"variant": "MCBM", "gamma": g}, 0, ref.splits)
        accs.append(training.evaluate(run.model, run.splits[2], with_losses=False)["task_accuracy"])
    assert accs[1] <= accs[0] + 0.02 and accs[2] <= accs[1] + 0.02, accs
