import numpy as np
import pytest
import torch

from fewvod.encoder import (
    EncoderConfig,
    FrameEmbeddings,
    PrecomputedEncoder,
    SyntheticEncoder,
    image_to_tensor,
    load_encoder,
    load_frame_embeddings,
    save_encoder,
    save_frame_embeddings,
)
from fewvod.errors import CheckpointError, ConfigError, DataError


def small_encoder(seed=0):
    return SyntheticEncoder(EncoderConfig(patch_size=8, embed_dim=32), seed=seed)


def random_image(rng, h=32, w=32):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def test_grid_arithmetic():
    enc = small_encoder()
    fe = enc.encode(np.zeros((32, 48, 3), dtype=np.uint8))
    assert fe.grid_shape == (4, 6)
    assert fe.num_patches == 24
    assert fe.embed_dim == 32
    assert fe.objectness.shape == (24,)


def test_indivisible_image_rejected():
    enc = small_encoder()
    with pytest.raises(ConfigError):
        enc.encode(np.zeros((30, 32, 3), dtype=np.uint8))


def test_objectness_range():
    rng = np.random.default_rng(0)
    fe = small_encoder().encode(random_image(rng))
    assert (fe.objectness >= 0).all() and (fe.objectness <= 1).all()


def test_seeded_construction_is_deterministic():
    rng = np.random.default_rng(1)
    img = random_image(rng)
    a = small_encoder(seed=3).encode(img)
    b = small_encoder(seed=3).encode(img)
    assert torch.equal(a.embeddings, b.embeddings)
    assert torch.equal(a.objectness, b.objectness)
    c = small_encoder(seed=4).encode(img)
    assert not torch.equal(a.embeddings, c.embeddings)


def test_constant_image_gives_identical_patches():
    enc = small_encoder()
    img = np.full((32, 32, 3), 77, dtype=np.uint8)
    fe = enc.encode(img)
    spread = (fe.embeddings - fe.embeddings[0]).abs().max().item()
    assert spread < 1e-9


def test_patch_shift_equivariance():
    # no positional embeddings: rolling by a whole patch permutes the outputs
    enc = small_encoder()
    rng = np.random.default_rng(2)
    img = random_image(rng)
    base = enc.encode(img).embeddings
    rolled = enc.encode(np.roll(img, 8, axis=0)).embeddings
    rows, cols = 4, 4
    for r in range(rows):
        for c in range(cols):
            src = ((r - 1) % rows) * cols + c
            assert torch.allclose(rolled[r * cols + c], base[src], atol=1e-9)


def test_image_to_tensor_scaling():
    img = np.full((8, 8, 3), 255, dtype=np.uint8)
    t = image_to_tensor(img)
    assert t.dtype == torch.float64
    assert t.max().item() == 1.0
    f = image_to_tensor(np.full((8, 8, 3), 0.5, dtype=np.float32))
    assert abs(f.max().item() - 0.5) < 1e-7
    with pytest.raises(ConfigError):
        image_to_tensor(np.zeros((8, 8), dtype=np.uint8))


def test_checkpoint_round_trip(tmp_path):
    enc = small_encoder(seed=9)
    rng = np.random.default_rng(3)
    img = random_image(rng)
    before = enc.encode(img)
    path = tmp_path / "enc.pt"
    save_encoder(enc, str(path))
    loaded = load_encoder(str(path), expect_embed_dim=32)
    after = loaded.encode(img)
    assert torch.equal(before.embeddings, after.embeddings)


def test_checkpoint_dim_mismatch(tmp_path):
    path = tmp_path / "enc.pt"
    save_encoder(small_encoder(), str(path))
    with pytest.raises(ConfigError):
        load_encoder(str(path), expect_embed_dim=64)


def test_checkpoint_corrupt(tmp_path):
    path = tmp_path / "junk.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_encoder(str(path))


def test_frame_embeddings_validation():
    emb = torch.zeros((4, 32))
    obj = torch.full((4,), 0.5)
    FrameEmbeddings(emb, obj, (2, 2))  # valid
    with pytest.raises(DataError):
        FrameEmbeddings(emb, obj, (3, 2))
    with pytest.raises(DataError):
        FrameEmbeddings(emb, torch.full((3,), 0.5), (2, 2))
    with pytest.raises(DataError):
        FrameEmbeddings(emb, torch.full((4,), 1.5), (2, 2))
    bad = emb.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(DataError):
        FrameEmbeddings(bad, obj, (2, 2))


def test_npz_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    fe = small_encoder().encode(random_image(rng))
    path = tmp_path / "frame_0000.npz"
    save_frame_embeddings(str(path), fe)
    back = load_frame_embeddings(str(path))
    assert back.grid_shape == fe.grid_shape
    # float32 storage
    assert torch.allclose(back.embeddings, fe.embeddings, atol=1e-5)
    assert torch.allclose(back.objectness, fe.objectness, atol=1e-6)


def test_precomputed_backend(tmp_path):
    enc = small_encoder()
    rng = np.random.default_rng(5)
    frames = [enc.encode(random_image(rng)) for _ in range(3)]
    for i, fe in enumerate(frames):
        save_frame_embeddings(str(tmp_path / f"frame_{i:04d}.npz"), fe)
    backend = PrecomputedEncoder(str(tmp_path))
    assert len(backend) == 3
    assert backend.embed_dim == 32
    out = backend.encode_all()
    for fe, loaded in zip(frames, out):
        assert torch.allclose(loaded.embeddings, fe.embeddings, atol=1e-5)


def test_precomputed_backend_empty(tmp_path):
    with pytest.raises(DataError):
        PrecomputedEncoder(str(tmp_path))


def test_precomputed_backend_dim_mismatch(tmp_path):
    rng = np.random.default_rng(6)
    save_frame_embeddings(str(tmp_path / "a.npz"), small_encoder().encode(random_image(rng)))
    other = SyntheticEncoder(EncoderConfig(patch_size=8, embed_dim=64))
    save_frame_embeddings(str(tmp_path / "b.npz"), other.encode(random_image(rng)))
    backend = PrecomputedEncoder(str(tmp_path))
    with pytest.raises(DataError):
        backend.encode_all()


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(patch_size=0).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=4).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=34).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(backend_kind="resnet").validate()
