import dataclasses

import numpy as np
import pytest

from bitraj import container
from bitraj.datagen import GenConfig, generate
from bitraj.experts import (
    ArchDigestError,
    NonFiniteTrainingError,
    TrainConfig,
    TrainingError,
    load_trajectory,
    run_training,
    save_trajectory,
    train_expert,
    train_experts,
)
from bitraj.model import BackboneSpec, LoraSpec, VLModel, arch_digest, lora_param_reduction
from bitraj.retrieval import random_baseline_expectation, recall_at_k

SMALL = GenConfig(n_train=120, n_val=10, n_test=60, K=2, latent_dim=8, d_img=16, e_txt=12, sigma_img=0.1, sigma_txt=0.1)
SPEC = BackboneSpec(kind="identity", in_dim=16, embed_dim=8)
CFG = TrainConfig(epochs=3, batch_size=30, lr=0.2, seed=4)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL)


def test_snapshot_count_and_layout(small):
    t = train_expert(small["train"], SPEC, CFG)
    assert len(t.snapshots) == 4 and t.epochs == 3
    assert all(s.layout == t.layout for s in t.snapshots)
    assert t.arch_digest == arch_digest(SPEC, 12)
    assert len(t.loss_log) == 3


def test_snapshot_zero_is_the_initialization(small):
    t = train_expert(small["train"], SPEC, CFG)
    init = VLModel(SPEC, 12, init_seed=CFG.seed).param_vector()
    assert t.snapshots[0].values.tobytes() == init.values.tobytes()


def test_same_seed_bit_identical(small):
    a = train_expert(small["train"], SPEC, CFG)
    b = train_expert(small["train"], SPEC, CFG)
    for x, y in zip(a.snapshots, b.snapshots):
        assert x.values.tobytes() == y.values.tobytes()
    assert a.loss_log == b.loss_log


def test_resuming_from_a_snapshot_replays_exactly(small):
    t = train_expert(small["train"], SPEC, CFG)
    m = VLModel(SPEC, 12, init_seed=CFG.seed)
    m.load_param_vector(t.snapshots[1])
    ds = small["train"]
    run_training(m, ds.images, ds.captions, ds.K, CFG, start_epoch=1, epochs=2)
    assert m.param_vector().values.tobytes() == t.snapshots[3].values.tobytes()


def test_loss_decreases_on_default_config():
    ds = generate(GenConfig())["train"]
    spec = BackboneSpec(kind="identity", in_dim=64, embed_dim=32)
    cfg = TrainConfig(epochs=5, batch_size=100, lr=0.1)
    t = train_expert(ds, spec, cfg)
    assert t.loss_log[-1] < t.loss_log[0]
    assert t.loss_log[-1] < 0.9 * np.log(cfg.batch_size)


def test_full_data_upper_bound_beats_random_by_20x():
    ds = generate(GenConfig())
    spec = BackboneSpec(kind="identity", in_dim=64, embed_dim=32)
    t = train_expert(ds["train"], spec, TrainConfig(epochs=5, batch_size=100, lr=0.1))
    m = VLModel(spec, 32)
    m.load_param_vector(t.snapshots[-1])
    tr, ir = recall_at_k(m, ds["test"])
    assert tr.recall[1] >= 20 * random_baseline_expectation(500, 5, 1, "TR")
    assert ir.recall[1] >= 20 * random_baseline_expectation(500, 5, 1, "IR")


def test_distinct_seeds_give_distinct_starts(small):
    trajs = train_experts(small["train"], SPEC, dataclasses.replace(CFG, epochs=1), num_trajectories=20)
    starts = {t.snapshots[0].values.tobytes() for t in trajs}
    assert len(starts) == 20
    assert [t.seed for t in trajs] == list(range(4, 24))


def test_concurrent_matches_sequential(small, tmp_path):
    cfg = dataclasses.replace(CFG, epochs=2)
    seq = train_experts(small["train"], SPEC, cfg, num_trajectories=3, jobs=1)
    par = train_experts(small["train"], SPEC, cfg, num_trajectories=3, jobs=3)
    for i, (a, b) in enumerate(zip(seq, par)):
        save_trajectory(a, tmp_path / f"s{i}.btrj")
        save_trajectory(b, tmp_path / f"p{i}.btrj")
        assert (tmp_path / f"s{i}.btrj").read_bytes() == (tmp_path / f"p{i}.btrj").read_bytes()


def test_lora_scope_snapshot_size(small):
    spec = BackboneSpec(kind="one_hidden_tanh", in_dim=16, hidden_dim=20, out_dim=10, embed_dim=8, lora=LoraSpec(2, (0, 1)))
    t = train_expert(small["train"], spec, dataclasses.replace(CFG, epochs=1))
    full, adapted, _ = lora_param_reduction(spec)
    proj = 10 * 8 + 12 * 8
    assert len(t.snapshots[0]) == adapted + proj
    assert t.scope == "lora"
    full_t = train_expert(small["train"], dataclasses.replace(spec, lora=None), dataclasses.replace(CFG, epochs=1))
    assert len(full_t.snapshots[0]) == full + proj


def test_lora_training_never_touches_frozen_weights(small):
    spec = BackboneSpec(kind="one_hidden_tanh", in_dim=16, hidden_dim=20, out_dim=10, lora=LoraSpec(2, (0,)))
    m = VLModel(spec, 12)
    before = m.frozen_digest()
    ds = small["train"]
    run_training(m, ds.images, ds.captions, ds.K, CFG)
    assert m.frozen_digest() == before


def test_dimension_mismatch(small):
    with pytest.raises(TrainingError):
        train_expert(small["train"], BackboneSpec(in_dim=99), CFG)


def test_non_finite_training_aborts_with_diagnostic(small):
    with np.errstate(all="ignore"), pytest.raises(NonFiniteTrainingError, match=r"epoch 1, step \d+"):
        train_expert(small["train"], SPEC, dataclasses.replace(CFG, lr=1e308))


def test_trajectory_round_trip(small, tmp_path):
    t = train_expert(small["train"], SPEC, CFG)
    save_trajectory(t, tmp_path / "t.btrj")
    back = load_trajectory(tmp_path / "t.btrj", expect_arch=arch_digest(SPEC, 12))
    assert back.loss_log == t.loss_log and back.layout == t.layout
    for a, b in zip(t.snapshots, back.snapshots):
        assert a.values.tobytes() == b.values.tobytes()


def test_trajectory_format_errors(small, tmp_path):
    t = train_expert(small["train"], SPEC, dataclasses.replace(CFG, epochs=1))
    path = tmp_path / "t.btrj"
    save_trajectory(t, path)
    with pytest.raises(ArchDigestError):
        load_trajectory(path, expect_arch=arch_digest(BackboneSpec(in_dim=16, embed_dim=4), 12))
    raw = bytearray(path.read_bytes())
    raw[4] = 2
    (tmp_path / "v.btrj").write_bytes(bytes(raw))
    with pytest.raises(container.VersionError):
        load_trajectory(tmp_path / "v.btrj")
    (tmp_path / "m.btrj").write_bytes(b"BVLD" + path.read_bytes()[4:])
    with pytest.raises(container.BadMagicError):
        load_trajectory(tmp_path / "m.btrj")
    (tmp_path / "x.btrj").write_bytes(path.read_bytes()[:-3])
    with pytest.raises(container.TruncatedError):
        load_trajectory(tmp_path / "x.btrj")
