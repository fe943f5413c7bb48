import numpy as np
import pytest
import torch

from fewvod.detector import Detector, evaluate_detector, load_detector, save_detector
from fewvod.errors import CheckpointError, ConfigError

from .conftest import make_tiny_config


@pytest.fixture(scope="module")
def detector():
    return Detector(make_tiny_config())


@pytest.fixture(scope="module")
def episode(tiny_dataset):
    return tiny_dataset.by_split("train")[0]


def test_construction_matches_config(detector):
    cfg = make_tiny_config()
    assert detector.embed_dim == cfg.encoder.embed_dim
    for p in detector.parameters():
        assert p.dtype == torch.float64


def test_seeded_construction_deterministic(episode):
    a = Detector(make_tiny_config(seed=2))
    b = Detector(make_tiny_config(seed=2))
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_encode_support_shapes(detector, episode):
    protos = detector.encode_support(episode.support_by_category())
    assert protos.num_categories == len(episode.categories)
    assert protos.embed_dim == detector.embed_dim
    assert protos.categories == episode.categories


def test_forward_video_probability_rows(detector, episode):
    protos = detector.encode_support(episode.support_by_category())
    video = episode.videos[0]
    result, embeddings = detector.forward_video(list(video.frames), protos)
    assert len(result.frames) == len(video.frames)
    assert len(embeddings) == len(video.frames)
    n = len(episode.categories)
    for fr in result.frames:
        assert fr.outputs.probs.shape[1] == n + 1
        sums = fr.outputs.probs.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-9)


def test_fusion_disabled_overrides(detector, episode):
    protos = detector.encode_support(episode.support_by_category())
    video = episode.videos[0]
    result, _ = detector.forward_video(list(video.frames), protos, fusion_enabled=False)
    assert all(fr.retained_in == 0 for fr in result.frames)


def test_infer_video_records(detector, episode):
    protos = detector.encode_support(episode.support_by_category())
    video = episode.videos[0]
    records, result = detector.infer_video(list(video.frames), video.name, protos, kappa=0.0)
    # kappa 0 fires every patch
    patches = result.frames[0].outputs.probs.shape[0]
    assert len(records) == patches * len(video.frames)
    assert all(r.video == video.name for r in records)
    assert all(r.category in episode.categories for r in records)
    assert all(r.confidence is not None for r in records)


def test_infer_videos_stats(detector, episode):
    records, stats = detector.infer_videos([episode], tau=0.0)
    assert set(stats) == {"mean_propagated_per_frame", "mean_emitted_per_frame", "num_frames"}
    expected_frames = sum(len(v.frames) for v in episode.videos)
    assert stats["num_frames"] == expected_frames
    assert stats["mean_emitted_per_frame"] == pytest.approx(len(records) / expected_frames)


def test_inference_is_repeatable(detector, episode):
    a, stats_a = detector.infer_videos([episode], kappa=0.5)
    b, stats_b = detector.infer_videos([episode], kappa=0.5)
    assert a == b
    assert stats_a == stats_b


def test_checkpoint_round_trip(tmp_path, detector, episode):
    path = tmp_path / "det.pt"
    save_detector(detector, str(path))
    loaded = load_detector(str(path))
    protos = detector.encode_support(episode.support_by_category())
    protos2 = loaded.encode_support(episode.support_by_category())
    assert torch.equal(protos.matrix, protos2.matrix)
    video = episode.videos[0]
    r1, _ = detector.infer_video(list(video.frames), video.name, protos, kappa=0.5)
    r2, _ = loaded.infer_video(list(video.frames), video.name, protos2, kappa=0.5)
    assert r1 == r2


def test_checkpoint_wrong_kind(tmp_path, detector):
    path = tmp_path / "junk.pt"
    torch.save({"kind": "mystery"}, str(path))
    with pytest.raises(CheckpointError):
        load_detector(str(path))


def test_comparable_config_isolates_fusion_toggle(detector):
    d = detector.comparable_config()
    assert "fusion_enabled" in d
    assert "enabled" not in d.get("fusion", {})


def test_evaluate_detector(detector, tiny_dataset):
    result = evaluate_detector(detector, tiny_dataset.by_split("novel"), kappa=0.5)
    assert 0.0 <= result.ap <= 1.0
    assert result.class_gt_counts


def test_evaluate_detector_no_episodes(detector):
    with pytest.raises(ConfigError):
        evaluate_detector(detector, [])
