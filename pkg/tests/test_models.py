import numpy as np
import pytest

from gradcheck import check_gradients
from rgcnode.layers import count_params
from rgcnode.models import MODEL_KINDS, SequencePlan, build_model, default_hidden, run_sequence
from rgcnode.tensor import ShapeError, Tensor

SMALL = dict(latent=8, encoder_channels=(2, 2, 2, 2))


@pytest.mark.parametrize("m,n,w,frames", [(1, 40, 0, 40), (8, 5, 0, 40), (2, 20, 5, 35), (4, 10, 0, 40),
                                          (2, 20, 0, 40), (3, 7, 6, 9)])
def test_plan_frame_counts(m, n, w, frames):
    plan = SequencePlan(m, n, w)
    assert plan.total_frames == frames == m * n - (m - 1) * w
    starts = plan.starts()
    assert len(starts) == m and starts[-1] + n == frames


def test_plan_validation():
    with pytest.raises(ValueError):
        SequencePlan(2, 5, 5)
    with pytest.raises(ValueError):
        SequencePlan(0, 5, 0)


def test_single_step_for_1x40():
    model = build_model("cfc", 3, SequencePlan(1, 40), **SMALL)
    calls = []
    step = model.predictor.step
    model.predictor.step = lambda *a: calls.append(1) or step(*a)
    model(np.zeros((1, 40, 50, 50)))
    assert len(calls) == 1


def test_stacks_fed_in_order():
    plan = SequencePlan(3, 4, 1)
    model = build_model("lstm", 2, plan, **SMALL)
    seen = []
    enc = model.encoder
    frames = np.arange(plan.total_frames, dtype=float)[None, :, None, None] * np.ones((2, 1, 50, 50))

    class Spy:
        in_frames = 4

        def __call__(self, x):
            seen.append(x.data[:, :, 0, 0].copy())
            return enc(x)

    run_sequence(model, plan, frames, Spy())
    stacked = seen[0]
    assert stacked.shape == (6, 4)
    for m, s in enumerate(plan.starts()):
        assert np.array_equal(stacked[2 * m], np.arange(s, s + 4))


def test_frame_count_mismatch_message():
    model = build_model("ltc", 3, SequencePlan(2, 20, 5), **SMALL)
    with pytest.raises(ShapeError, match="35"):
        model(np.zeros((1, 40, 50, 50)))


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_batch_invariance(kind):
    plan = SequencePlan(2, 5, 1) if kind != "convnet" else SequencePlan(1, 9)
    model = build_model(kind, 3, plan, seed=4, **SMALL)
    x = np.random.default_rng(0).uniform(-0.5, 0.5, (5, plan.total_frames, 50, 50))
    full = model(x).data
    for i in range(5):
        assert np.array_equal(model(x[i:i + 1]).data[0], full[i])
    assert np.array_equal(model(x[[3, 1]]).data, full[[3, 1]])


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_relu_at_inference_only(kind):
    model = build_model(kind, 4, SequencePlan(1, 5), seed=1, **SMALL)
    for p in model.predictor_parameters():
        if p.ndim == 1 and p.shape[0] == 4:
            p.data[:] = -5.0
    x = np.random.default_rng(1).uniform(-0.5, 0.5, (3, 5, 50, 50))
    assert np.all(model(x).data >= 0)
    assert np.any(model(x, training=True).data < 0)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_build_is_deterministic(kind):
    a = build_model(kind, 3, SequencePlan(1, 5), seed=7, **SMALL)
    b = build_model(kind, 3, SequencePlan(1, 5), seed=7, **SMALL)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


def test_parameter_groups_partition_parameters():
    for kind in MODEL_KINDS:
        model = build_model(kind, 3, SequencePlan(1, 5), **SMALL)
        ids = [id(p) for p in model.encoder_parameters() + model.predictor_parameters()]
        assert sorted(ids) == sorted(id(p) for p in model.parameters())


def test_default_hidden_sizes():
    assert [default_hidden(n) for n in (9, 14, 27)] == [16, 24, 32]


def test_full_ltc_param_count_scale():
    n = count_params(build_model("ltc", 9))
    assert 10_000 < n < 500_000


def test_convnet_rejects_multi_step_plan():
    with pytest.raises(ValueError):
        build_model("convnet", 3, SequencePlan(2, 20))


@pytest.mark.parametrize("kind", ["lstm", "ltc", "cfc"])
def test_end_to_end_gradient(kind):
    model = build_model(kind, 2, SequencePlan(2, 3, 1), seed=2, latent=4, encoder_channels=(2, 2, 2, 2),
                        image_size=16, unfold_steps=2)
    x = np.random.default_rng(3).uniform(-0.5, 0.5, (2, 5, 16, 16))
    params = [model.encoder.blocks[0].conv.kernels, model.encoder.head.weight] + model.predictor_parameters()[:4]
    assert check_gradients(lambda: model(Tensor(x), training=True).sum(), params, probes=5) < 1e-4
