import pytest
import torch

from fewvod.encoder import FrameEmbeddings
from fewvod.errors import ConfigError, DataError
from fewvod.support import Prototypes, build_prototype, build_prototypes, select_object_patch


def fe_with_objectness(obj_values, embed_dim=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    p = len(obj_values)
    emb = torch.randn((p, embed_dim), generator=g, dtype=torch.float64)
    obj = torch.tensor(obj_values, dtype=torch.float64)
    return FrameEmbeddings(emb, obj, (1, p))


def test_select_argmax():
    fe = fe_with_objectness([0.1, 0.9, 0.4, 0.2])
    idx, emb = select_object_patch(fe)
    assert idx == 1
    assert torch.equal(emb, fe.embeddings[1])


def test_select_tie_breaks_low():
    fe = fe_with_objectness([0.3, 0.7, 0.7, 0.1])
    idx, _ = select_object_patch(fe)
    assert idx == 1


def test_build_prototype_is_mean():
    g = torch.Generator().manual_seed(1)
    vecs = [torch.randn(16, generator=g, dtype=torch.float64) for _ in range(5)]
    proto = build_prototype(vecs)
    oracle = torch.stack(vecs).mean(dim=0)
    assert torch.allclose(proto, oracle, atol=0, rtol=0)


def test_build_prototype_single():
    v = torch.arange(8, dtype=torch.float64)
    assert torch.equal(build_prototype([v]), v)


def test_build_prototype_shot_order_invariant():
    g = torch.Generator().manual_seed(2)
    vecs = [torch.randn(16, generator=g, dtype=torch.float64) for _ in range(4)]
    a = build_prototype(vecs)
    b = build_prototype(list(reversed(vecs)))
    assert torch.allclose(a, b, atol=1e-12)


def test_build_prototype_norm_bound():
    # mean of vectors has norm at most the max input norm (convexity)
    g = torch.Generator().manual_seed(3)
    vecs = [torch.randn(16, generator=g, dtype=torch.float64) for _ in range(6)]
    proto = build_prototype(vecs)
    assert proto.norm().item() <= max(v.norm().item() for v in vecs) + 1e-12


def test_build_prototype_errors():
    with pytest.raises(ConfigError):
        build_prototype([])
    with pytest.raises(ConfigError):
        build_prototype([torch.zeros(8), torch.zeros(9)])


def test_build_prototypes_order_and_values():
    shots = {
        "circle_solid": [fe_with_objectness([0.2, 0.8], seed=4), fe_with_objectness([0.9, 0.1], seed=5)],
        "star_dotted": [fe_with_objectness([0.5, 0.6], seed=6), fe_with_objectness([0.3, 0.4], seed=7)],
    }
    protos = build_prototypes(shots)
    assert protos.categories == ["circle_solid", "star_dotted"]
    assert protos.matrix.shape == (2, 8)
    expect_circle = build_prototype(
        [shots["circle_solid"][0].embeddings[1], shots["circle_solid"][1].embeddings[0]]
    )
    assert torch.equal(protos.matrix[0], expect_circle)
    assert protos.index_of("star_dotted") == 1


def test_build_prototypes_unbalanced():
    shots = {
        "a_solid": [fe_with_objectness([0.5])],
        "b_solid": [fe_with_objectness([0.5]), fe_with_objectness([0.6])],
    }
    with pytest.raises(ConfigError):
        build_prototypes(shots)


def test_build_prototypes_empty():
    with pytest.raises(ConfigError):
        build_prototypes({})
    with pytest.raises(ConfigError):
        build_prototypes({"a_solid": []})


def test_prototypes_validation():
    mat = torch.zeros((2, 8), dtype=torch.float64)
    Prototypes(["a", "b"], mat)  # valid
    with pytest.raises(DataError):
        Prototypes(["a"], mat)
    with pytest.raises(DataError):
        Prototypes(["a", "a"], mat)
    bad = mat.clone()
    bad[0, 0] = float("inf")
    with pytest.raises(DataError):
        Prototypes(["a", "b"], bad)
    with pytest.raises(DataError):
        Prototypes(["a", "b"], mat).index_of("missing")
