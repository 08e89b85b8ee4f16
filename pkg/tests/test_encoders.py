"""Frozen-encoder and projection tests: shapes, freezing, determinism."""

import numpy as np

from lavseg.encoders import EncoderConfig, ModalityEncoders, patchify

CFG = EncoderConfig(seed=1, d_audio=4, d_visual=8, d_text=8, patch=4,
                    d_audio_raw=16)


def test_patchify_layout():
    frame = np.arange(3 * 8 * 8, dtype=np.float64).reshape(3, 8, 8)
    out = patchify(frame, 4)
    assert out.shape == (4, 48)
    # first patch row holds channel 0's top-left 4x4 block, row-major
    np.testing.assert_array_equal(out[0, :16], frame[0, :4, :4].ravel())
    np.testing.assert_array_equal(out[3, 32:], frame[2, 4:, 4:].ravel())


def test_output_shapes():
    enc = ModalityEncoders(CFG, d_shared=8)
    audio = enc.audio(np.zeros((5, 16)))
    assert audio.shape == (5, 4)
    text = enc.text([0, 3, 7])
    assert text.shape == (3, 8)
    frames = np.zeros((2, 3, 8, 8))
    patches, cls = enc.visual(frames)
    assert len(patches) == 2 and len(cls) == 2
    assert patches[0].shape == (4, 8) and cls[0].shape == (1, 8)
    assert enc.proj_audio(audio).shape == (5, 8)
    assert enc.proj_text(text).shape == (3, 8)
    assert enc.proj_visual(patches[0]).shape == (4, 8)


def test_freezing_policy():
    enc = ModalityEncoders(CFG, d_shared=8)
    for name, t in enc.params().items():
        if name.startswith("enc."):
            assert not t.requires_grad, name
        else:
            assert name.startswith("proj.") and t.requires_grad, name


def test_encoder_init_deterministic():
    a = ModalityEncoders(CFG, d_shared=8)
    b = ModalityEncoders(CFG, d_shared=8)
    for name, t in a.params().items():
        np.testing.assert_array_equal(t.data, b.params()[name].data)
    c = ModalityEncoders(EncoderConfig(seed=2, d_audio=4, d_visual=8,
                                       d_text=8, d_audio_raw=16), d_shared=8)
    assert not np.array_equal(a.params()["enc.text.table"].data,
                              c.params()["enc.text.table"].data)


def test_frozen_outputs_stable_across_instances():
    rng = np.random.default_rng(0)
    frames = rng.random((2, 3, 8, 8))
    a = ModalityEncoders(CFG, d_shared=8)
    b = ModalityEncoders(CFG, d_shared=8)
    pa, _ = a.visual(frames)
    pb, _ = b.visual(frames)
    np.testing.assert_array_equal(pa[0].data, pb[0].data)
