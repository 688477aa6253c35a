import dataclasses
import math

import numpy as np
import pytest

from cmath_erc import autodiff as ad
from cmath_erc.data import SynthConfig, generate_synthetic, make_batches, pad_batch
from cmath_erc.model import CmathModel, DataShape, TrainConfig
from cmath_erc.training import Adam

SMALL = TrainConfig(d=16, heads=2, epochs=2, batch_size=4, seed=0)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(SynthConfig(num_conversations=5, min_len=3, max_len=8, num_classes=4,
                                          dims=(6, 5, 4), seed=1))


def _model(ds, **kw):
    return CmathModel(dataclasses.replace(SMALL, **kw), DataShape.of(ds))


def test_forward_shapes(ds):
    model = _model(ds)
    batch = make_batches(ds, 4)[0]
    out = model.forward(batch)
    b, n = batch.mask.shape
    assert out.h_x.shape == (b, n, 16)
    for head in "tavx":
        assert out.probs[head].shape == (b, n, 4)
    assert set(out.recon) == set("tav")


def test_parameter_registration_is_reproducible(ds):
    a, b = _model(ds), _model(ds)
    assert a.params.names() == b.params.names()
    for (_, x), (_, y) in zip(a.params.items(), b.params.items()):
        assert np.array_equal(x.data, y.data)
    assert a.speaker_table.shape == (16, ds.num_speakers + 1)


def test_config_validation():
    for bad in (dict(modalities=""), dict(d=15), dict(d=16, heads=3), dict(kernel_sizes=(1, 2, 1)),
                dict(lr=0.0), dict(eval_head="t", modalities="av"), dict(mse_reduction="max")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"nope": 1})
    cfg = TrainConfig(d=32)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.d_ff == 128 and cfg.d_h == 32


def test_losses_independent_of_batch_composition(ds):
    model = _model(ds)
    solo = {}
    for conv in ds.conversations:
        batch = pad_batch([conv], ds.num_classes)
        terms = model.per_conversation_losses(model.forward(batch), batch)
        solo[conv.id] = {k: float(v.data[0]) for k, v in terms.items()}
    for batch in make_batches(ds, 4):
        terms = model.per_conversation_losses(model.forward(batch), batch)
        for i, cid in enumerate(batch.ids):
            for k, v in terms.items():
                assert float(v.data[i]) == pytest.approx(solo[cid][k], rel=1e-5, abs=1e-5), (cid, k)


def test_eval_forward_is_deterministic(ds):
    model = _model(ds)
    batch = make_batches(ds, 5)[0]
    a = model.forward(batch).h_x.data
    b = model.forward(batch).h_x.data
    assert a.tobytes() == b.tobytes()


def test_ce_heads_at_init_near_log_c():
    data = generate_synthetic(SynthConfig(num_conversations=6, num_classes=6, seed=2))
    model = CmathModel(TrainConfig(d=32, seed=0), DataShape.of(data))
    batch = make_batches(data, 6)[0]
    # the fused head sees an average of modality samples, so its logits start near zero
    assert abs(model.loss(model.forward(batch), batch).ce_per_head["x"] - math.log(6)) <= 0.1 * math.log(6)
    for clf in model.classifiers.values():
        clf.weight.data[:] = 0.0
    parts = model.loss(model.forward(batch), batch)
    for head, v in parts.ce_per_head.items():
        assert v == pytest.approx(math.log(6), abs=1e-5), head


def test_total_recomposes(ds):
    model = _model(ds)
    batch = make_batches(ds, 5)[0]
    parts = model.loss(model.forward(batch, training=True, rng=np.random.default_rng(0)), batch)
    assert parts.total == pytest.approx(parts.recompose(), rel=1e-6)
    assert all(v >= 0 for v in [parts.re, *parts.ce_per_head.values(), *parts.mse_per_modality.values()])
    assert all(v >= -1e-6 for v in parts.kl_per_modality.values())


def test_teacher_detachment(ds):
    """Distillation terms contribute no gradient to the fusion MLPs or the fused head."""
    model = _model(ds)
    batch = make_batches(ds, 5)[0]
    out = model.forward(batch, training=True, rng=np.random.default_rng(0))
    parts = model.loss(out, batch)
    distill = None
    term = model.per_conversation_losses(out, batch)
    for m in "tav":
        piece = term[f"mse[{m}]"].mean() * 1.0 + term[f"kl[{m}]"].mean() * 1.8
        distill = piece if distill is None else distill + piece
    model.params.zero_grad()
    distill.backward()
    for name, t in model.params.items():
        if name.startswith("fusion.") or name.startswith("classifier.x."):
            assert t.grad is None or not np.any(t.grad), name
    assert any(t.grad is not None and np.any(t.grad) for n, t in model.params.items() if n.startswith("cma."))
    assert parts.total > 0


def test_zero_gammas_do_not_change_fusion_gradients(ds):
    batch = make_batches(ds, 5)[0]
    grads = []
    for g1, g2 in ((1.0, 1.8), (0.0, 0.0)):
        model = _model(ds, gamma1=g1, gamma2=g2)
        model.params.zero_grad()
        model.loss(model.forward(batch, training=True, rng=np.random.default_rng(0)), batch).total_tensor.backward()
        grads.append({n: t.grad.copy() for n, t in model.params.items() if n.startswith("fusion.")})
    for name in grads[0]:
        np.testing.assert_allclose(grads[0][name], grads[1][name], rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("lr", [1e-3, 1e-4])
def test_one_step_decreases_loss(ds, lr):
    model = _model(ds)
    batch = make_batches(ds, 5)[0]
    base = model.forward(batch)
    teacher = (base.h_x.data.copy(), base.probs["x"].data.copy())
    before = model.loss(base, batch, teacher)
    model.params.zero_grad()
    before.total_tensor.backward()
    Adam(model.params, lr).step()
    after = model.loss(model.forward(batch), batch, teacher)
    assert after.total < before.total


def test_without_cma_passes_representations_through(ds):
    model = _model(ds, without_cma=True)
    out = model.forward(make_batches(ds, 5)[0])
    for m in "tav":
        assert out.h_prime[m] is out.h[m]
    assert not any(n.startswith("cma.") for n in model.params.names())


def test_without_mr_drops_reconstruction(ds):
    model = _model(ds, without_mr=True)
    batch = make_batches(ds, 5)[0]
    out = model.forward(batch)
    assert out.recon == {}
    assert out.h_x.shape[-1] == 16
    assert model.loss(out, batch).re == 0.0


@pytest.mark.parametrize("mods", ["t", "a", "v", "ta", "tv", "av", "tav"])
def test_modality_subsets(ds, mods):
    model = _model(ds, modalities=mods)
    batch = make_batches(ds, 5)[0]
    out = model.forward(batch, training=True, rng=np.random.default_rng(0))
    assert set(out.h_prime) == set(mods)
    assert model.heads == list(mods) + ["x"]
    gate_cols = {n: model.params[n].shape[1] for n in model.params.names() if n.endswith("gate_w")}
    assert all(c == len(mods) for c in gate_cols.values())
    if len(mods) == 1:
        assert gate_cols == {}
    model.loss(out, batch).total_tensor.backward()


def test_unknown_speakers_use_the_reserved_column(ds):
    model = _model(ds)
    batch = make_batches(ds, 1)[0]
    out_known = model.forward(batch).h_x.data
    batch.speakers[:] = ds.num_speakers + 3
    model.speaker_table.data[:, ds.num_speakers] = 0.0
    unk = model.forward(batch).h_x.data
    assert not np.allclose(out_known, unk)


def test_class_mismatch(ds):
    model = _model(ds)
    other = generate_synthetic(SynthConfig(num_conversations=1, num_classes=3, dims=(6, 5, 4), seed=1))
    with pytest.raises(ValueError, match="class mismatch"):
        model.check_compatible(other)
