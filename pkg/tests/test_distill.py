import dataclasses

import numpy as np
import pytest

from _fd import numeric_grad, rel_err

from bitraj import tensor as T
from bitraj.datagen import GenConfig, generate
from bitraj.distill import (
    ALPHA_FLOOR,
    DegenerateSegmentError,
    DistillConfig,
    DistillError,
    DistilledSet,
    distill,
    init_distilled,
    load_distilled,
    mmd_distill,
    save_distilled,
    student_unroll,
    trajectory_loss,
)
from bitraj.experts import TrainConfig, train_experts
from bitraj.model import BackboneSpec, LoraSpec, ParamVector, VLModel

GEN = GenConfig(n_train=60, n_val=5, n_test=20, K=2, d_img=12, e_txt=6, latent_dim=5)
SPEC = BackboneSpec(kind="identity", in_dim=12, embed_dim=5)
HIDDEN = BackboneSpec(kind="one_hidden_tanh", in_dim=12, hidden_dim=7, out_dim=5, embed_dim=4)
CFG = DistillConfig(M=4, T_plus=1, R=2, R_hat=3, outer_steps=5, seed=3)


@pytest.fixture(scope="module")
def data():
    return generate(GEN)


@pytest.fixture(scope="module")
def trajs(data):
    return train_experts(data["train"], SPEC, TrainConfig(epochs=3, batch_size=20, lr=0.3), num_trajectories=3)


def _theta(model):
    return model.param_vector()


def test_zero_steps_or_zero_alpha_leave_theta(data, rng):
    m = VLModel(SPEC, 6, init_seed=1)
    theta = _theta(m)
    x, y = rng.standard_normal((4, 12)), rng.standard_normal((4, 6))
    out = student_unroll(m, x, y, [[0.1]], theta, dataclasses.replace(CFG, R_hat=0))
    for name, arr in theta.to_arrays().items():
        assert np.array_equal(out[name].value, arr)
    out = student_unroll(m, x, y, [[0.0]], theta, dataclasses.replace(CFG, R_hat=4))
    for name, arr in theta.to_arrays().items():
        assert np.array_equal(out[name].value, arr)


def test_unroll_rejects_layout_mismatch(rng):
    m = VLModel(SPEC, 6)
    other = VLModel(HIDDEN, 6).param_vector()
    with pytest.raises(DistillError):
        student_unroll(m, rng.standard_normal((2, 12)), rng.standard_normal((2, 6)), [[0.1]], other, CFG)


def test_one_step_norm_gradient_wrt_image_entry(rng):
    m = VLModel(HIDDEN, 6, init_seed=2)
    theta = _theta(m)
    x, y = rng.standard_normal((2, 12)), rng.standard_normal((2, 6))
    cfg = dataclasses.replace(CFG, R_hat=1)

    def value(xv):
        out = student_unroll(m, xv, y, [[0.3]], theta, cfg)
        return sum(float(np.sum(t.value**2)) for t in out.values())

    g = T.Graph()
    xv = g.variable(x)
    out = student_unroll(m, xv, y, [[0.3]], theta, cfg)
    total = None
    for t in out.values():
        total = T.frobenius_sq(t) if total is None else total + T.frobenius_sq(t)
    (gx,) = T.grad(total, [xv])
    fd = numeric_grad(value, x)
    assert rel_err(gx.value, fd) < 1e-4
    assert np.abs(gx.value).max() > 1e-6


def _perturbed(pv: ParamVector, rng, scale) -> ParamVector:
    return ParamVector(pv.values + scale * rng.standard_normal(len(pv)), pv.layout, pv.scope)


@pytest.mark.parametrize("spec", [HIDDEN, dataclasses.replace(HIDDEN, lora=LoraSpec(2, (0, 1)))], ids=["full", "lora"])
def test_end_to_end_gradients_match_finite_differences(spec, rng):
    m = VLModel(spec, 6, init_seed=5)
    start = _perturbed(_theta(m), rng, 0.1)
    target = _perturbed(start, rng, 0.2)
    cfg = dataclasses.replace(CFG, M=2, R_hat=2, match_scope=spec.scope)
    x, y, a = rng.standard_normal((2, 12)), rng.standard_normal((2, 6)), np.array([[0.4]])

    def value(xv, yv, av):
        return trajectory_loss(student_unroll(m, xv, yv, av, start, cfg), start, target).item()

    g = T.Graph()
    xv, yv, av = g.variable(x), g.variable(y), g.variable(a)
    loss = trajectory_loss(student_unroll(m, xv, yv, av, start, cfg), start, target)
    gx, gy, ga = T.grad(loss, [xv, yv, av])
    assert rel_err(gx.value, numeric_grad(lambda z: value(z, y, a), x)) < 1e-4
    assert rel_err(gy.value, numeric_grad(lambda z: value(x, z, a), y)) < 1e-4
    assert rel_err(ga.value, numeric_grad(lambda z: value(x, y, z), a)) < 1e-4


def _pv(img, txt):
    return ParamVector.from_arrays({"img_proj": np.array([img], float), "txt_proj": np.array([txt], float)}, "full")


def test_trajectory_loss_cases():
    start, target = _pv([0, 0], [0]), _pv([1, 0], [1])
    assert trajectory_loss(target, start, target).item() == 0.0
    assert abs(trajectory_loss(start, start, target).item() - 2.0) < 1e-12
    assert abs(trajectory_loss(_pv([0.5, 0], [1]), start, target).item() - 0.25) < 1e-12


def test_degenerate_segment():
    start = _pv([0, 0], [0])
    with pytest.raises(DegenerateSegmentError):
        trajectory_loss(start, start, _pv([1, 0], [0]))


def test_lora_trajectory_loss_groups_adapters_with_image_side(rng):
    m = VLModel(dataclasses.replace(HIDDEN, lora=LoraSpec(2, (0,))), 6)
    start = m.param_vector()
    target = _perturbed(start, rng, 0.1)
    # text side at its target, adapters and img_proj halfway: 0 + 0.25 only if they form one group
    arr_s, arr_t = start.to_arrays(), target.to_arrays()
    half = {k: (arr_s[k] + arr_t[k]) / 2 if k != "txt_proj" else arr_t[k] for k in arr_s}
    assert trajectory_loss(ParamVector.from_arrays(half, "lora"), start, target).item() == pytest.approx(0.25)


def test_distill_runs_and_keeps_alpha_positive(data, trajs):
    d, hist = distill(trajs, data["train"], SPEC, CFG)
    assert len(hist["loss"]) == 5 and all(a >= ALPHA_FLOOR for a in hist["alpha"])
    assert d.images.shape == (4, 12) and d.texts.shape == (4, 6)
    assert all(0 <= s <= CFG.T_plus for _, s in hist["segments"])
    assert d.provenance["method"] == "trajectory"


def test_alpha_floor_clamp(data, trajs):
    d, hist = distill(trajs, data["train"], SPEC, dataclasses.replace(CFG, lr_alpha=1e6, outer_steps=3))
    assert min(hist["alpha"]) >= ALPHA_FLOOR and d.alpha >= ALPHA_FLOOR


def test_distill_is_reproducible(data, trajs):
    a, ha = distill(trajs, data["train"], SPEC, CFG)
    b, hb = distill(trajs, data["train"], SPEC, CFG)
    assert a.images.tobytes() == b.images.tobytes() and a.texts.tobytes() == b.texts.tobytes()
    assert a.alpha == b.alpha and ha == hb


def test_freeze_both_moves_only_alpha(data, trajs):
    cfg = dataclasses.replace(CFG, freeze_img=True, freeze_txt=True)
    init = init_distilled(data["train"], cfg)
    d, _ = distill(trajs, data["train"], SPEC, cfg, init=init)
    assert d.images.tobytes() == init.images.tobytes()
    assert d.texts.tobytes() == init.texts.tobytes()
    assert d.alpha != init.alpha


def test_freeze_one_side(data, trajs):
    init = init_distilled(data["train"], CFG)
    d, _ = distill(trajs, data["train"], SPEC, dataclasses.replace(CFG, freeze_txt=True), init=init)
    assert d.texts.tobytes() == init.texts.tobytes() and d.images.tobytes() != init.images.tobytes()


def test_zero_outer_steps_returns_init(data, trajs):
    init = init_distilled(data["train"], CFG)
    d, hist = distill(trajs, data["train"], SPEC, dataclasses.replace(CFG, outer_steps=0), init=init)
    assert d.images.tobytes() == init.images.tobytes() and d.alpha == init.alpha and hist["loss"] == []


def test_config_errors(data, trajs):
    with pytest.raises(DistillError, match="exceeds trajectory length"):
        distill(trajs, data["train"], SPEC, dataclasses.replace(CFG, T_plus=2))
    with pytest.raises(DistillError):
        distill(trajs, data["train"], SPEC, dataclasses.replace(CFG, R_hat=0))
    with pytest.raises(DistillError):
        distill(trajs, data["train"], HIDDEN, CFG)
    with pytest.raises(DistillError):
        distill([], data["train"], SPEC, CFG)
    with pytest.raises(DistillError):
        DistillConfig.from_dict({**CFG.to_dict(), "lr": 1.0})


def test_all_degenerate_segments_abort(data, trajs):
    frozen = [dataclasses.replace(t, snapshots=[t.snapshots[0]] * len(t.snapshots)) for t in trajs]
    with pytest.raises(DegenerateSegmentError, match="16"):
        distill(frozen, data["train"], SPEC, CFG)


def test_lora_distillation_never_changes_frozen_weights(data):
    spec = BackboneSpec(kind="one_hidden_tanh", in_dim=12, hidden_dim=7, out_dim=5, embed_dim=4, lora=LoraSpec(2, (0, 1)))
    ts = train_experts(data["train"], spec, TrainConfig(epochs=3, batch_size=20, lr=0.3), num_trajectories=2)
    before = VLModel(spec, 6).frozen_digest()
    d, hist = distill(ts, data["train"], spec, dataclasses.replace(CFG, match_scope="lora", outer_steps=3))
    assert VLModel(spec, 6).frozen_digest() == before and len(hist["loss"]) == 3
    with pytest.raises(DistillError, match="scope"):
        distill(ts, data["train"], spec, CFG)


def test_init_modes(data):
    a, b = init_distilled(data["train"], CFG), init_distilled(data["train"], CFG)
    assert a.images.tobytes() == b.images.tobytes() and a.texts.tobytes() == b.texts.tobytes()
    src = a.provenance["source_indices"]
    assert len(set(src)) == CFG.M
    assert np.array_equal(a.images, data["train"].images[src])
    for j, i in enumerate(src):
        assert any(np.array_equal(a.texts[j], c) for c in data["train"].captions_of(i))
    mixed = init_distilled(data["train"], dataclasses.replace(CFG, init_img="gaussian"))
    assert mixed.provenance["init_img"] == "gaussian" and not np.array_equal(mixed.images, a.images)
    assert a.alpha == 0.1
    with pytest.raises(DistillError):
        init_distilled(data["train"], dataclasses.replace(CFG, M=61))
    assert len(init_distilled(data["train"], dataclasses.replace(CFG, M=61, init_img="gaussian", init_txt="gaussian"))) == 61


def test_mmd_on_the_full_set_has_zero_loss():
    ds = generate(GenConfig(n_train=30, n_val=2, n_test=2, K=1, d_img=12, e_txt=6, latent_dim=5))["train"]
    cfg = dataclasses.replace(CFG, M=30, real_batch=30, outer_steps=4)
    init = DistilledSet(ds.images.copy(), ds.captions.copy(), 0.1)
    d, hist = mmd_distill(ds, SPEC, cfg, init=init)
    assert max(hist["loss"]) < 1e-24
    assert np.allclose(d.images, ds.images, atol=1e-10)


def test_mmd_moves_data_and_respects_freeze(data):
    init = init_distilled(data["train"], CFG)
    d, hist = mmd_distill(data["train"], SPEC, CFG, init=init)
    assert d.images.tobytes() != init.images.tobytes() and len(hist["loss"]) == 5
    f, _ = mmd_distill(data["train"], SPEC, dataclasses.replace(CFG, freeze_img=True), init=init)
    assert f.images.tobytes() == init.images.tobytes()


def test_distilled_round_trip(data, tmp_path):
    d = init_distilled(data["train"], CFG)
    save_distilled(d, tmp_path / "d.bdst")
    back = load_distilled(tmp_path / "d.bdst")
    assert back.images.tobytes() == d.images.tobytes() and back.texts.tobytes() == d.texts.tobytes()
    assert back.alpha == d.alpha and back.provenance == d.provenance


def test_distilled_set_invariants():
    with pytest.raises(DistillError):
        DistilledSet(np.ones((2, 3)), np.ones((3, 2)), 0.1)
    with pytest.raises(DistillError):
        DistilledSet(np.ones((0, 3)), np.ones((0, 2)), 0.1)
