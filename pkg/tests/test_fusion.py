"""Fusion transformer tests: sequence assembly, history accumulation,
token propagation, and the mean-pooling variant."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lavseg.autodiff import ShapeError, Tensor
from lavseg.fusion import (FrameFeatures, FusionConfig, FusionTransformer,
                           sequence_length)


def _feats(rng, d, n_frames, n_audio=3, n_text=4, n_patches=5):
    return FrameFeatures(
        audio=Tensor(rng.normal(size=(n_audio, d))),
        text=Tensor(rng.normal(size=(n_text, d))),
        visual=[Tensor(rng.normal(size=(n_patches, d))) for _ in range(n_frames)],
        cls=[Tensor(rng.normal(size=(1, d))) for _ in range(n_frames)],
    )


def _small(n_seg=1, strategy="learnable-token"):
    return FusionTransformer(FusionConfig(layers=1, dim=8, heads=2,
                                          n_seg=n_seg, strategy=strategy))


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(layers=0).validate()
    with pytest.raises(ValueError):
        FusionConfig(dim=10, heads=4).validate()
    with pytest.raises(ValueError):
        FusionConfig(n_seg=0).validate()
    with pytest.raises(ValueError):
        FusionConfig(strategy="max").validate()


def test_assemble_sequence_layout():
    rng = np.random.default_rng(0)
    fuser = _small(n_seg=2)
    feats = _feats(rng, 8, n_frames=1)
    state = fuser.initial_state()
    z = fuser.assemble_sequence(state, feats.audio, feats.text, feats.visual[0])
    assert z.shape == (sequence_length(2, 3, 4, 5, 0), 8)
    np.testing.assert_array_equal(z.data[0:2], fuser.seg.data)
    np.testing.assert_array_equal(z.data[2:5], feats.audio.data)
    np.testing.assert_array_equal(z.data[5:6], fuser.aud.data)
    np.testing.assert_array_equal(z.data[6:10], feats.text.data)
    np.testing.assert_array_equal(z.data[10:11], fuser.vis.data)
    np.testing.assert_array_equal(z.data[11:16], feats.visual[0].data)


def test_assemble_rejects_wrong_dim():
    rng = np.random.default_rng(0)
    fuser = _small()
    feats = _feats(rng, 8, n_frames=1)
    with pytest.raises(ShapeError):
        fuser.assemble_sequence(fuser.initial_state(),
                                Tensor(np.zeros((3, 4))), feats.text,
                                feats.visual[0])


def test_history_grows_one_per_frame():
    rng = np.random.default_rng(1)
    fuser = _small()
    feats = _feats(rng, 8, n_frames=3)
    state = fuser.initial_state()
    for i in range(3):
        state = fuser.propagate_step(state, feats, i)
        assert len(state.his) == i + 1
        assert state.current_seg.shape == (1, 8)
    np.testing.assert_array_equal(state.his[0].data, feats.cls[0].data)


def test_step_excludes_current_frame_cls():
    """The sequence for frame i must contain cls tokens of frames < i only."""
    rng = np.random.default_rng(2)
    fuser = _small()
    f0 = _feats(rng, 8, n_frames=2)
    # same features but a different cls for frame 1: frame-1 output of the
    # first step pair must not change, since step 1 only sees cls of frame 0
    f1 = FrameFeatures(audio=f0.audio, text=f0.text, visual=f0.visual,
                       cls=[f0.cls[0], Tensor(rng.normal(size=(1, 8)))])
    s0 = fuser.propagate_step(fuser.initial_state(), f0, 0)
    s1 = fuser.propagate_step(fuser.initial_state(), f1, 0)
    a = fuser.propagate_step(s0, f0, 1)
    b = fuser.propagate_step(s1, f1, 1)
    np.testing.assert_array_equal(a.current_seg.data, b.current_seg.data)


def test_position_zero_extraction():
    rng = np.random.default_rng(3)
    fuser = _small(n_seg=2)
    feats = _feats(rng, 8, n_frames=1)
    z = fuser.assemble_sequence(fuser.initial_state(), feats.audio,
                                feats.text, feats.visual[0])
    out = fuser.run_blocks(z)
    state = fuser.propagate_step(fuser.initial_state(), feats, 0)
    np.testing.assert_array_equal(state.current_seg.data, out.data[:2])


def test_fuse_video_shapes_and_one_frame():
    rng = np.random.default_rng(4)
    fuser = _small(n_seg=3)
    feats = _feats(rng, 8, n_frames=2)
    assert fuser.fuse_video(feats).shape == (3, 8)
    with pytest.raises(ValueError):
        fuser.fuse_video(_feats(rng, 8, n_frames=0))


def test_mean_strategy():
    rng = np.random.default_rng(5)
    fuser = _small(n_seg=2, strategy="mean")
    feats = _feats(rng, 8, n_frames=2)
    out = fuser.fuse_video(feats)
    assert out.shape == (2, 8)
    np.testing.assert_array_equal(out.data[0], out.data[1])
    with pytest.raises(ValueError):
        fuser.fuse_video(feats, strategy="max")


def test_only_seg_token_trainable():
    fuser = _small()
    params = fuser.params()
    assert params["tok.seg"].requires_grad
    assert not params["tok.aud"].requires_grad
    assert not params["tok.vis"].requires_grad


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 8),
       st.integers(1, 16), st.integers(0, 4), st.integers(0, 10_000))
def test_sequence_length_formula(n_seg, n_audio, n_text, n_patches, n_his, seed):
    """The formula predicts the assembled row count for any config."""
    rng = np.random.default_rng(seed)
    fuser = _small(n_seg=n_seg)
    state = fuser.initial_state()
    state.his = [Tensor(rng.normal(size=(1, 8))) for _ in range(n_his)]
    z = fuser.assemble_sequence(state,
                                Tensor(rng.normal(size=(n_audio, 8))),
                                Tensor(rng.normal(size=(n_text, 8))),
                                Tensor(rng.normal(size=(n_patches, 8))))
    assert z.shape[0] == sequence_length(n_seg, n_audio, n_text,
                                         n_patches, n_his)


def test_fuse_videos_matches_per_sample():
    rng = np.random.default_rng(5)
    fuser = _small(n_seg=2)
    feats = [_feats(rng, 8, n_frames=3, n_text=n_text, n_audio=n_audio)
             for n_text, n_audio in ((2, 3), (6, 3), (4, 1))]
    singles = [fuser.fuse_video(f).data for f in feats]
    packed = fuser.fuse_videos(feats)
    assert len(packed) == len(feats)
    for one, many in zip(singles, packed):
        np.testing.assert_allclose(many.data, one, rtol=1e-12, atol=1e-12)


def test_fuse_videos_fallback_paths():
    rng = np.random.default_rng(6)
    # mixed frame counts fall back to the per-sample path
    fuser = _small()
    feats = [_feats(rng, 8, n_frames=2), _feats(rng, 8, n_frames=4)]
    packed = fuser.fuse_videos(feats)
    for f, got in zip(feats, packed):
        np.testing.assert_array_equal(got.data, fuser.fuse_video(f).data)
    # mean strategy falls back as well
    fuser = _small(strategy="mean")
    feats = [_feats(rng, 8, n_frames=2)]
    np.testing.assert_array_equal(fuser.fuse_videos(feats)[0].data,
                                  fuser.fuse_video(feats[0]).data)


def test_forward_packed_block_matches_separate():
    from lavseg.nn import TransformerBlock

    rng = np.random.default_rng(7)
    blk = TransformerBlock(np.random.default_rng(0), 8, 2)
    rows = [Tensor(rng.normal(size=(n, 8))) for n in (3, 7, 5)]
    from lavseg import autodiff as ad
    packed = blk.forward_packed(ad.concat(rows, axis=0),
                                [(0, 3), (3, 7), (10, 5)])
    separate = [blk(r).data for r in rows]
    np.testing.assert_allclose(packed.data, np.concatenate(separate, axis=0),
                               rtol=1e-12, atol=1e-12)
