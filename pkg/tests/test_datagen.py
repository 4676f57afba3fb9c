import numpy as np
import pytest

from bitraj import container
from bitraj.datagen import ConfigError, GenConfig, PairedDataset, generate, load_dataset, save_dataset
from bitraj.retrieval import random_baseline_expectation, recall_from_scores


def lstsq_retrieval_r1(cfg: GenConfig) -> float:
    """Fit a linear image->text map on train by least squares and measure
    test image->text R@1 with cosine scores."""
    ds = generate(cfg)
    tr, te = ds["train"], ds["test"]
    y_tr = tr.captions[:: tr.K]
    coef, *_ = np.linalg.lstsq(tr.images, y_tr, rcond=None)
    pred = te.images @ coef
    pred /= np.linalg.norm(pred, axis=1, keepdims=True)
    caps = te.captions / np.linalg.norm(te.captions, axis=1, keepdims=True)
    return recall_from_scores(pred @ caps.T, te.K)["TR"][1]


def test_noise_free_linear_oracle_is_perfect():
    cfg = GenConfig(n_train=300, n_val=10, n_test=200, K=1, sigma_img=0.0, sigma_txt=0.0, seed=3)
    assert lstsq_retrieval_r1(cfg) == 1.0


def test_heavy_noise_degrades_toward_random():
    cfg = GenConfig(n_train=300, n_val=10, n_test=200, K=1, sigma_img=10.0, sigma_txt=10.0, seed=3)
    r1 = lstsq_retrieval_r1(cfg)
    assert r1 < 10 * random_baseline_expectation(200, 1, 1, "TR")


def test_same_seed_is_bit_identical():
    a, b = generate(GenConfig(seed=5, n_train=50)), generate(GenConfig(seed=5, n_train=50))
    for split in a:
        assert a[split].images.tobytes() == b[split].images.tobytes()
        assert a[split].captions.tobytes() == b[split].captions.tobytes()
    c = generate(GenConfig(seed=6, n_train=50))
    assert c["train"].images.tobytes() != a["train"].images.tobytes()


def test_shapes_and_k_captions():
    ds = generate(GenConfig(n_train=40, n_val=5, n_test=7, K=3))
    assert ds["train"].images.shape == (40, 64)
    assert ds["train"].captions.shape == (120, 32)
    assert len(ds["test"]) == 7 and ds["test"].split == "test"


def test_splits_share_no_latent():
    ds = generate(GenConfig(n_train=200, n_val=50, n_test=50))
    seen = {row.tobytes() for row in ds["train"].latents}
    for split in ("val", "test"):
        assert not any(row.tobytes() in seen for row in ds[split].latents)


def test_class_mode_has_exactly_c_distinct_captions():
    ds = generate(GenConfig(mode="class", n_classes=10, n_train=300, K=2))
    assert len({row.tobytes() for row in ds["train"].captions}) == 10


def test_class_mode_multi_caption_variants():
    ds = generate(GenConfig(mode="class", n_classes=4, n_train=200, K=5, multi_caption=True))
    tr = ds["train"]
    assert len({row.tobytes() for row in tr.captions}) == 20
    # items of the same class share all of their captions
    lab = tr.labels
    i, j = np.flatnonzero(lab == lab[0])[:2]
    assert np.array_equal(tr.captions_of(i), tr.captions_of(j))


@pytest.mark.parametrize(
    "bad",
    [dict(latent_dim=40), dict(sigma_img=-0.1), dict(K=0), dict(n_train=0), dict(mode="words")],
)
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        generate(GenConfig(**bad))


def _tiny() -> PairedDataset:
    rng = np.random.default_rng(0)
    return PairedDataset(images=rng.standard_normal((3, 4)), captions=rng.standard_normal((6, 2)), K=2, split="train")


def test_round_trip_bit_identical(tmp_path):
    ds = _tiny()
    save_dataset(ds, tmp_path / "d.bvld")
    back = load_dataset(tmp_path / "d.bvld")
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.captions.tobytes() == ds.captions.tobytes()
    assert back.K == 2 and back.split == "train"


def test_round_trip_generated_split(tmp_path):
    ds = generate(GenConfig(n_train=20, mode="class", n_classes=3))["train"]
    save_dataset(ds, tmp_path / "t.bvld")
    back = load_dataset(tmp_path / "t.bvld")
    assert back.labels.tobytes() == ds.labels.tobytes()
    assert back.latents.tobytes() == ds.latents.tobytes()
    assert back.gen_config_hash == ds.gen_config_hash


def test_bad_magic(tmp_path):
    save_dataset(_tiny(), tmp_path / "d.bvld")
    raw = bytearray((tmp_path / "d.bvld").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "d.bvld").write_bytes(bytes(raw))
    with pytest.raises(container.BadMagicError):
        load_dataset(tmp_path / "d.bvld")


def test_truncated_payload(tmp_path):
    save_dataset(_tiny(), tmp_path / "d.bvld")
    raw = (tmp_path / "d.bvld").read_bytes()
    (tmp_path / "d.bvld").write_bytes(raw[:-1])
    with pytest.raises(container.TruncatedError):
        load_dataset(tmp_path / "d.bvld")


def test_version_and_digest_errors(tmp_path):
    save_dataset(_tiny(), tmp_path / "d.bvld")
    raw = bytearray((tmp_path / "d.bvld").read_bytes())
    bumped = bytearray(raw)
    bumped[4] = 2
    (tmp_path / "v.bvld").write_bytes(bytes(bumped))
    with pytest.raises(container.VersionError):
        load_dataset(tmp_path / "v.bvld")
    raw[-1] ^= 0xFF
    (tmp_path / "c.bvld").write_bytes(bytes(raw))
    with pytest.raises(container.DigestError):
        load_dataset(tmp_path / "c.bvld")
