import numpy as np

from proxtune import models, tasks
from proxtune.optim import AdamState, ProximityPolicy, optimizer_step
from proxtune.rng import Stream


def test_generate_is_deterministic():
    spec = tasks.make_task_triple(3).finetune
    a, b = tasks.generate(spec, 11, 100), tasks.generate(spec, 11, 100)
    assert a.inputs.tobytes() == b.inputs.tobytes() and a.targets.tobytes() == b.targets.tobytes()
    c = tasks.generate(spec, 12, 100)
    assert not np.array_equal(a.inputs, c.inputs)


def test_noiseless_identity_targets_are_teacher_outputs():
    spec = tasks.TaskSpec(5, 2, teacher_seed=4)
    ds = tasks.generate(spec, 0, 50)
    w1, b1, w2, b2 = tasks.teacher_weights(4, 5, 2)
    np.testing.assert_array_equal(ds.targets, np.tanh(ds.inputs @ w1 + b1) @ w2 + b2)


def test_input_shift_sample_mean():
    n = 10_000
    spec = tasks.TaskSpec(4, 1, 0, tasks.Shift(2.0))
    ds = tasks.generate(spec, 5, n)
    assert np.all(np.abs(ds.inputs.mean(axis=0) - 2.0) < 3.0 / np.sqrt(n))
    assert np.all(np.abs(ds.inputs.std(axis=0) - 1.0) < 0.05)


def test_affine_transform_applied():
    base = tasks.TaskSpec(3, 2, 1, tasks.Shift(1.0))
    moved = tasks.TaskSpec(3, 2, 1, tasks.Shift(1.0, tasks.TargetTransform.affine(1.2, 0.3)))
    a, b = tasks.generate(base, 0, 20), tasks.generate(moved, 0, 20)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_allclose(b.targets, 1.2 * a.targets + 0.3, rtol=1e-15)


def test_task_triple_contract():
    tri = tasks.make_task_triple(7)
    assert tri.pretrain.teacher_seed == tri.finetune.teacher_seed == tri.ood_eval.shift.teacher_seed == 7
    assert tri.ood_eval.retention == tri.pretrain
    assert tri.pretrain.shift == tasks.Shift()
    assert tri.finetune.shift.input_mean_shift == 1.5
    assert tri.finetune.shift.target_transform == tasks.TargetTransform.affine(1.2, 0.3)
    assert tri.ood_eval.shift.shift.input_mean_shift == -1.0


def _fit(ds, steps=1500, seed=0):
    spec = models.default_model_spec(init_seed=seed)
    model = models.build_model(spec)
    state = AdamState(alpha=1e-3)
    batches = Stream(seed, "fit")
    for _ in range(steps):
        idx = batches.integers(len(ds), 64)
        out, cache = models.forward(model, spec, ds.inputs[idx])
        _, dout = models.loss_mse(out, ds.targets[idx])
        optimizer_step(model, models.backward(model, spec, cache, dout), state, ProximityPolicy())
    return spec, model


def test_finetune_only_fit_forgets_pretrain_distribution():
    tri = tasks.make_task_triple(0)
    pre, ft = tasks.generate(tri.pretrain, 1, 4096), tasks.generate(tri.finetune, 2, 4096)
    probe = tasks.generate(tri.ood_eval.retention, 3, 2048)
    spec, on_pre = _fit(pre)
    _, on_ft = _fit(ft)
    loss = lambda m, d: models.loss_mse(models.predict(m, spec, d.inputs), d.targets)[0]
    assert loss(on_ft, probe) > loss(on_pre, probe)


def test_csv_round_trip(tmp_path):
    ds = tasks.generate(tasks.make_task_triple(1).finetune, 3, 25)
    path = tasks.export_csv(ds, tmp_path / "d.csv")
    assert path.read_text().splitlines()[0] == "x0,x1,x2,x3,x4,x5,x6,x7,y0,y1,y2,y3"
    back = tasks.import_csv(path)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.targets, ds.targets)
