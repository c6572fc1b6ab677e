import numpy as np
import pytest

from mcmkd.data import N_CLASSES, SlideConfig
from mcmkd.encoders import (STUDENT_SPEC, TEACHER_SPEC, EmaTeacher, EncoderSpec, PatchEncoder, PretrainConfig,
                            clone, ema_update, patch_pool, pretrain_encoder)
from mcmkd.rng import stream
from mcmkd.tensor import DimensionError, Tensor, TrainingDivergence, tsum

SMALL = PretrainConfig(n_slides=4, steps=60, batch=32, eval_every=30, min_acc=0.0, n_heldout=200)


def test_parameter_counts():
    assert STUDENT_SPEC.param_count() == 25_376
    assert TEACHER_SPEC.param_count() == 39_520
    for spec in (STUDENT_SPEC, TEACHER_SPEC):
        assert PatchEncoder(spec, stream(0, "enc")).num_parameters() == spec.param_count()


def test_teacher_is_wider_and_costlier():
    assert STUDENT_SPEC.out_dim < TEACHER_SPEC.out_dim
    assert STUDENT_SPEC.flops_per_patch() < TEACHER_SPEC.flops_per_patch()


def test_hand_flops():
    spec = EncoderSpec(channels=(2,), kernels=(3,), out_dim=4, patch=4, in_ch=1)
    # conv 2x2 outputs * 2 ch * 9 taps, then 1x1x2 flat -> 4
    assert spec.flops_per_patch() == 2 * 2 * 2 * 9 + 2 * 4


def test_output_shape_and_identical_patches():
    enc = PatchEncoder(STUDENT_SPEC, stream(0, "enc"))
    patch = stream(1, "px").random((16, 16, 3))
    out = enc(np.stack([patch, patch, patch])).data
    assert out.shape == (3, 64)
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_batch_order_equivariance():
    enc = PatchEncoder(STUDENT_SPEC, stream(0, "enc"))
    x = stream(2, "px").random((6, 16, 16, 3))
    perm = np.array([3, 1, 5, 0, 2, 4])
    np.testing.assert_allclose(enc(x[perm]).data, enc(x).data[perm], atol=1e-12)


def test_encode_chunks_agree():
    enc = PatchEncoder(STUDENT_SPEC, stream(0, "enc"))
    x = stream(3, "px").random((10, 16, 16, 3))
    np.testing.assert_allclose(enc.encode(x, chunk=3), enc(x).data, atol=1e-12)


def test_frozen_encoder_gets_no_gradient():
    enc = PatchEncoder(TEACHER_SPEC, stream(0, "teacher"))
    enc.freeze()
    x = Tensor(stream(4, "px").random((2, 16, 16, 3)), requires_grad=True)
    tsum(enc(x)).backward()
    assert all(p.grad is None for p in enc.parameters())
    assert x.grad is not None


def test_kernels_too_large_for_patch():
    with pytest.raises(DimensionError):
        PatchEncoder(EncoderSpec(channels=(4,), kernels=(9,), out_dim=8, patch=8), stream(0, "e"))


class TestEma:
    def setup_method(self):
        self.student = PatchEncoder(STUDENT_SPEC, stream(0, "s"))
        self.ema = EmaTeacher(self.student, tau=0.999)
        for p in self.student.parameters():
            p.data = p.data + 1.0

    def test_tau_one_keeps_teacher(self):
        before = [p.data.copy() for p in self.ema.parameters()]
        ema_update(self.ema, self.student.parameters(), tau=1.0)
        for a, p in zip(before, self.ema.parameters()):
            assert np.array_equal(a, p.data)

    def test_tau_zero_copies_student(self):
        ema_update(self.ema, self.student.parameters(), tau=0.0)
        for s, t in zip(self.student.parameters(), self.ema.parameters()):
            assert np.array_equal(s.data, t.data)

    def test_default_tau_formula(self):
        before = [p.data.copy() for p in self.ema.parameters()]
        ema_update(self.ema, self.student.parameters())
        for b, s, t in zip(before, self.student.parameters(), self.ema.parameters()):
            np.testing.assert_allclose(t.data, 0.999 * b + 0.001 * s.data, rtol=0, atol=1e-15)

    def test_scalar_case(self):
        enc = PatchEncoder(EncoderSpec((1,), (1,), 1, patch=2, in_ch=1), stream(0, "x"))
        for p in enc.parameters():
            p.data[...] = 0.0
        ema = EmaTeacher(enc, tau=0.999)
        src = clone(enc)
        for p in src.parameters():
            p.data[...] = 1.0
        ema_update(ema, src.parameters())
        assert all(np.allclose(p.data, 0.001, rtol=0, atol=1e-15) for p in ema.parameters())

    def test_shape_mismatch(self):
        other = PatchEncoder(TEACHER_SPEC, stream(0, "t"))
        with pytest.raises(DimensionError):
            ema_update(self.ema, other.parameters())

    def test_teacher_is_frozen(self):
        assert self.ema.encoder.frozen


def test_patch_pool_labels_cover_classes():
    x, y = patch_pool(SlideConfig(), 0, 4, 0.05)
    assert x.shape[1:] == (16, 16, 3) and len(x) == len(y)
    assert set(np.unique(y)) <= set(range(N_CLASSES))


def test_pretraining_is_deterministic():
    a, ia = pretrain_encoder(STUDENT_SPEC, SlideConfig(), SMALL, 7, role="student")
    b, ib = pretrain_encoder(STUDENT_SPEC, SlideConfig(), SMALL, 7, role="student")
    assert ia["heldout_acc"] == ib["heldout_acc"]
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    assert a.frozen


def test_pretraining_below_floor_raises():
    cfg = PretrainConfig(n_slides=2, steps=1, batch=8, eval_every=1, min_acc=0.999, n_heldout=50)
    with pytest.raises(TrainingDivergence):
        pretrain_encoder(STUDENT_SPEC, SlideConfig(), cfg, 0)


def test_trained_teacher_groups_classes():
    cfg = PretrainConfig(n_slides=6, steps=300, eval_every=100, min_acc=0.0)
    teacher, info = pretrain_encoder(TEACHER_SPEC, SlideConfig(), cfg, 1, role="teacher")
    x, y = patch_pool(SlideConfig(), 99, 3, 0.05)
    f = teacher.encode(x)
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    sim = f @ f.T
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(y), dtype=bool)
    assert sim[same & off].mean() > sim[~same].mean()
    assert info["heldout_acc"] > 0.8
