import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dape.backbone import VideoClip
from dape.errors import NumericError, ShapeError, ValidationError
from dape.metrics import (BlockMatchingFlow, ConstantEmbedder, ConstantFlow, MetricReport, PrecomputedFlow,
                          ProjectionEmbedder, ZeroFlow, backward_warp, clip_frame, clip_text, evaluate,
                          evaluate_batch, interpolation_metrics, summarize, warping_error)
from dape.synthetic import translation_clip

from oracles import clip_frame_loop, clip_text_loop, interpolation_loop, warping_loop


class TableEmbedder:
    """Frame i (identified by its first pixel value) -> a declared vector."""

    name = "table"

    def __init__(self, vectors, text=None):
        self.vectors = vectors
        self.text = text

    def embed_frame(self, frame):
        return np.asarray(self.vectors[int(round(frame.flat[0] * 10))], float)

    def embed_text(self, text):
        return np.asarray(self.text, float)


def _indexed_clip(n):
    return VideoClip(np.stack([np.full((4, 4, 1), i / 10) for i in range(n)]).astype(np.float32))


def _const(values, size=4):
    return VideoClip(np.stack([np.full((size, size, 1), v) for v in values]).astype(np.float32))


def test_clip_frame_examples():
    emb = ProjectionEmbedder()
    assert clip_frame(emb, _const([0.3] * 4)) == pytest.approx(1.0, abs=1e-12)
    assert clip_frame(TableEmbedder([[1, 0], [0, 1]]), _indexed_clip(2)) == 0.0
    assert clip_frame(TableEmbedder([[1, 0], [1, 0], [0, 1]]), _indexed_clip(3)) == 0.5
    all_pairs = clip_frame(TableEmbedder([[1, 0], [1, 0], [0, 1]]), _indexed_clip(3), pairs="all")
    assert all_pairs == pytest.approx(1 / 3)
    with pytest.raises(NumericError):
        clip_frame(TableEmbedder([[0, 0], [1, 0]]), _indexed_clip(2))
    with pytest.raises(ValidationError):
        clip_frame(emb, _const([0.3]))


def test_clip_text_examples():
    assert clip_text(TableEmbedder([[1, 2], [1, 2]], text=[2, 4]), _indexed_clip(2), "p") == pytest.approx(1.0)
    assert clip_text(TableEmbedder([[1, 0]], text=[0, 3]), _indexed_clip(1), "p") == 0.0
    assert clip_text(TableEmbedder([[1, 0], [0, 1]], text=[1, 0]), _indexed_clip(2), "p") == 0.5
    assert clip_text(ConstantEmbedder(), _indexed_clip(3), "anything") == pytest.approx(1.0)


def test_interpolation_examples():
    assert interpolation_metrics(_const([0.4] * 5)) == (0.0, 99.0)
    assert interpolation_metrics(_const([0.0, 0.5, 1.0])) == (0.0, 99.0)
    err, psnr = interpolation_metrics(_const([0.0, 0.25, 1.0]))
    assert err == 0.25
    assert abs(psnr - 10 * math.log10(16)) < 0.01
    with pytest.raises(ValidationError):
        interpolation_metrics(_const([0.1, 0.2]))


def test_interpolation_exact_on_affine_in_time():
    rng = np.random.default_rng(0)
    a, b = rng.random((6, 6, 3)) * 0.5, rng.random((6, 6, 3)) * 0.1
    clip = VideoClip(np.stack([a + b * t / 4 for t in range(5)]))
    err, psnr = interpolation_metrics(clip)
    assert err < 1e-12 and psnr == 99.0


def test_warping_examples():
    flow = ZeroFlow()
    assert warping_error(flow, _const([0.2, 0.2, 0.2]), _const([0.6, 0.6, 0.6])) == 0.0
    src = _const([0.5, 0.5, 0.5])
    err = warping_error(flow, src, _const([0.2, 0.3, 0.4]))
    assert abs(err - 0.01) <= 1e-6
    moving = translation_clip(frames=4, size=16, shift=1)
    assert warping_error(ConstantFlow(-1.0, 0.0), moving, moving) == 0.0
    assert warping_error(ZeroFlow(), moving, moving) > 0
    with pytest.raises(ValidationError):
        warping_error(flow, _const([0.1, 0.2]), _const([0.1, 0.2, 0.3]))


def test_backward_warp_mask_and_bilinear():
    img = np.arange(12, dtype=float).reshape(3, 4, 1)
    flow = np.zeros((3, 4, 2))
    flow[..., 0] = 0.5
    warped, valid = backward_warp(img, flow)
    assert valid[:, :3].all() and not valid[:, 3].any()
    assert np.allclose(warped[:, :3, 0], img[:, :3, 0] + 0.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_metrics_match_loop_oracles(seed):
    rng = np.random.default_rng(seed)
    src = VideoClip(rng.random((3, 4, 4, 1)).astype(np.float32))
    edt = VideoClip(rng.random((3, 4, 4, 1)).astype(np.float32))
    flows = rng.uniform(-1.5, 1.5, (2, 4, 4, 2))

    class Fixed(PrecomputedFlow):
        def __init__(self):
            pass

        def pair_flows(self, frames):
            return flows

    emb = ProjectionEmbedder(dim=16, grid=2)
    prompt = "a small test"
    err, psnr = interpolation_metrics(edt)
    ref_err, ref_psnr = interpolation_loop(edt.frames)
    assert abs(err - ref_err) <= 1e-6 and abs(psnr - ref_psnr) <= 1e-6
    assert abs(warping_error(Fixed(), src, edt) - warping_loop(flows, edt.frames)) <= 1e-6
    assert abs(clip_frame(emb, edt) - clip_frame_loop(emb.embed_frame, edt.frames)) <= 1e-6
    ref_t = clip_text_loop(emb.embed_frame, emb.embed_text(prompt), edt.frames)
    assert abs(clip_text(emb, edt, prompt) - ref_t) <= 1e-6


def test_block_matching_recovers_translation():
    clip = translation_clip(frames=3, size=64, shift=3)
    flows = BlockMatchingFlow().pair_flows(clip.frames)
    assert flows.shape == (2, 64, 64, 2)
    assert np.all(flows[..., 0] == -3) and np.all(flows[..., 1] == 0)
    still = BlockMatchingFlow().pair_flows(np.repeat(clip.frames[:1], 2, 0))
    assert np.all(still == 0)


def test_block_matching_downsampled_large_frames():
    clip = translation_clip(frames=2, size=512, shift=8)
    flows = BlockMatchingFlow().pair_flows(clip.frames)
    assert np.linalg.norm(flows, axis=-1).mean() == pytest.approx(8.0)


def test_precomputed_flow_files(tmp_path):
    f0 = np.zeros((4, 4, 2))
    f0[..., 0] = -1
    np.save(tmp_path / "p0.npy", f0)
    np.savetxt(tmp_path / "p1.txt", f0.reshape(4, 8))
    flow = PrecomputedFlow([tmp_path / "p0.npy", tmp_path / "p1.txt"])
    got = flow.pair_flows(np.zeros((3, 4, 4, 1)))
    assert np.array_equal(got, np.stack([f0, f0]))
    with pytest.raises(ValidationError):
        flow.pair_flows(np.zeros((2, 4, 4, 1)))
    np.save(tmp_path / "bad.npy", np.zeros((3, 3, 2)))
    with pytest.raises(ShapeError):
        PrecomputedFlow([tmp_path / "bad.npy"]).pair_flows(np.zeros((2, 4, 4, 1)))


def test_evaluate_composition_and_roundtrip():
    src = translation_clip(frames=4, size=16, shift=1)
    rep = evaluate(src, src, "a caption", ProjectionEmbedder(), ConstantFlow(-1.0), "h", "row")
    assert rep.clip_f <= 1.0 and rep.warp_err == 0.0
    assert (rep.int_err, rep.int_psnr) == interpolation_metrics(src)
    same = evaluate(_const([0.3] * 3), _const([0.3] * 3), "x", ProjectionEmbedder(), ZeroFlow())
    assert same.clip_f == pytest.approx(1.0)
    assert MetricReport.from_json(rep.to_json()) == rep
    assert rep.scales["int_psnr"] == 1.0 and rep.scales["clip_f"] == 1e-2
    with pytest.raises(NumericError):
        MetricReport(float("nan"), 0, 0, 0, 0)


def test_batch_and_summary():
    rng = np.random.default_rng(1)
    items = [(VideoClip(rng.random((3, 8, 8, 3)), id=f"s{i}"), VideoClip(rng.random((3, 8, 8, 3)), id=f"e{i}"), "p")
             for i in range(4)]
    serial = evaluate_batch(items, ProjectionEmbedder(), ZeroFlow())
    parallel = evaluate_batch(items, ProjectionEmbedder(), ZeroFlow(), workers=3)
    assert serial == parallel and [r.edited_id for r in serial] == ["e0", "e1", "e2", "e3"]
    mean = summarize(serial)
    assert mean["n"] == 4
    assert mean["warp_err"] == pytest.approx(np.mean([r.warp_err for r in serial]))
    with pytest.raises(ValidationError):
        summarize([])


def test_relabeling_invariance():
    rng = np.random.default_rng(2)
    a, b = rng.random((3, 8, 8, 3)), rng.random((3, 8, 8, 3))
    r1 = evaluate(VideoClip(a, id="x"), VideoClip(b, id="y"), "p")
    r2 = evaluate(VideoClip(a, id="q"), VideoClip(b, id="r"), "p")
    assert r1.metrics() == r2.metrics()
