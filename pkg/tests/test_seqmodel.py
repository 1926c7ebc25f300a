import math

import numpy as np
import pytest
import torch

from recdistill.corpus import PAD, SequenceSample
from recdistill.errors import InputError, NumericError
from recdistill.seqmodel import (
    ModelSpec,
    TrainConfig,
    cross_entropy_loss,
    fit,
    load_checkpoint,
    predict_logits,
    predict_topn,
    save_checkpoint,
    score,
    topn_from_logits,
    write_trace,
)

ARCHS = ["gru", "attention"]


def test_cross_entropy_examples():
    assert float(cross_entropy_loss(torch.zeros(2), 1)) == pytest.approx(math.log(2))
    logits = torch.tensor([1.0, -1.0, 0.5], dtype=torch.float64)
    expected = -math.log(math.exp(0.5) / (math.e + math.exp(-1) + math.exp(0.5)))
    assert float(cross_entropy_loss(logits, 3)) == pytest.approx(expected, abs=1e-12)
    assert float(cross_entropy_loss(torch.tensor([60.0, 0.0]), 1)) < 1e-20


def test_cross_entropy_shift_invariant():
    logits = torch.randn(5, 7, dtype=torch.float64)
    targets = torch.tensor([1, 3, 7, 2, 2])
    assert torch.allclose(cross_entropy_loss(logits, targets), cross_entropy_loss(logits + 4.2, targets))


def test_cross_entropy_rejects_bad_input():
    with pytest.raises(NumericError):
        cross_entropy_loss(torch.tensor([float("inf"), 0.0]), 1)
    with pytest.raises(InputError):
        cross_entropy_loss(torch.zeros(3), 0)


def test_cross_entropy_gradient():
    logits = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    targets = torch.tensor([1, 4, 2])
    assert torch.autograd.gradcheck(lambda x: cross_entropy_loss(x, targets), (logits,),
                                    eps=1e-5, atol=1e-8, rtol=1e-4)


@pytest.mark.parametrize("arch", ARCHS)
def test_empty_history_gives_projection_bias(arch):
    model = ModelSpec(arch, num_items=6, max_len=4, embedding_size=8).build(0)
    logits = score(model, [PAD] * 4)
    assert torch.isfinite(logits).all()
    assert torch.allclose(logits, model.output.bias.detach())


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_is_deterministic_and_padding_invariant(arch):
    model = ModelSpec(arch, num_items=6, max_len=5, embedding_size=8).build(1)
    short = score(model, [PAD, 2, 3])
    assert torch.equal(short, score(model, [PAD, 2, 3]))
    assert torch.allclose(short, score(model, [PAD, PAD, PAD, 2, 3]), atol=1e-6)
    assert torch.allclose(short, score(model, [PAD] * 7 + [2, 3]), atol=1e-6)
    assert score(model, [1, 2, 3, 4, 5]).shape == (6,)


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_rejects_bad_ids(arch):
    model = ModelSpec(arch, num_items=6, max_len=4, embedding_size=8).build(0)
    with pytest.raises(InputError):
        score(model, [PAD, 7, 1, 2])
    with pytest.raises(InputError):
        score(model, [2, PAD, 1, 2])


def test_gru_forward_matches_hand_computation():
    spec = ModelSpec("gru", num_items=2, max_len=3, embedding_size=2, dropout=0.0, layers=1)
    model = spec.build(0).eval()
    gru = model.gru
    w_ir, w_iz, w_in = gru.weight_ih_l0.detach().chunk(3)
    w_hr, w_hz, w_hn = gru.weight_hh_l0.detach().chunk(3)
    b_ir, b_iz, b_in = gru.bias_ih_l0.detach().chunk(3)
    b_hr, b_hz, b_hn = gru.bias_hh_l0.detach().chunk(3)
    h = torch.zeros(2)
    for item in (1, 2):
        x = model.item_embedding.weight.detach()[item]
        r = torch.sigmoid(w_ir @ x + b_ir + w_hr @ h + b_hr)
        z = torch.sigmoid(w_iz @ x + b_iz + w_hz @ h + b_hz)
        n = torch.tanh(w_in @ x + b_in + r * (w_hn @ h + b_hn))
        h = (1 - z) * n + z * h
    expected = model.output.weight.detach() @ h + model.output.bias.detach()
    assert torch.allclose(score(model, [PAD, 1, 2]), expected, atol=1e-6)


def test_topn_order_and_ties():
    assert topn_from_logits(torch.tensor([0.1, 0.9, 0.5]), 2) == [2, 3]
    assert topn_from_logits(torch.zeros(5), 3) == [1, 2, 3]
    model = ModelSpec("gru", num_items=7, max_len=3, embedding_size=4).build(0)
    ranking = predict_topn(model, [PAD, 1, 2], 7)
    assert sorted(ranking) == list(range(1, 8))
    shifted = topn_from_logits(score(model, [PAD, 1, 2]) + 3.0, 7)
    assert shifted == ranking


def _repeat(sample, n):
    return [sample] * n


def test_fit_memorizes_single_sample():
    sample = SequenceSample(1, (PAD, 1, 2), 3, "train")
    spec = ModelSpec("gru", num_items=5, max_len=3, embedding_size=8, dropout=0.0, layers=1)
    cfg = TrainConfig(learning_rate=0.005, batch_size=8, max_epochs=5, early_stop_patience=10)
    result = fit(spec.build(0), _repeat(sample, 8), [sample], cfg)
    losses = [r.train_loss for r in result.trace]
    assert len(losses) == 5
    assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_fit_is_reproducible(toy_data, tiny_spec, tiny_train):
    _, parts, _ = toy_data
    first = fit(tiny_spec.build(5), parts["train"], parts["valid"], tiny_train)
    second = fit(tiny_spec.build(5), parts["train"], parts["valid"], tiny_train)
    for (name, a), (_, b) in zip(first.model.state_dict().items(), second.model.state_dict().items()):
        assert torch.equal(a, b), name
    assert [r.train_loss for r in first.trace] == [r.train_loss for r in second.trace]
    assert 1 <= first.best_epoch <= tiny_train.max_epochs


def test_trace_and_checkpoint_roundtrip(tmp_path, toy_data, tiny_spec, tiny_train):
    _, parts, _ = toy_data
    result = fit(tiny_spec.build(2), parts["train"], parts["valid"], tiny_train)
    write_trace(result, tmp_path / "trace.csv")
    header = (tmp_path / "trace.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,valid_ndcg10,wall_seconds"

    save_checkpoint(result.model, tmp_path / "model.ckpt")
    restored = load_checkpoint(tmp_path / "model.ckpt")
    assert restored.spec.architecture == "gru"
    np.testing.assert_array_equal(
        predict_logits(result.model, parts["test"]).numpy(),
        predict_logits(restored, parts["test"]).numpy(),
    )


def test_tied_attention_checkpoint(tmp_path):
    spec = ModelSpec("attention", num_items=9, max_len=4, embedding_size=8, tie_weights=True)
    model = spec.build(3)
    save_checkpoint(model, tmp_path / "a.ckpt")
    restored = load_checkpoint(tmp_path / "a.ckpt")
    assert restored.spec.tie_weights
    assert torch.equal(score(model, [PAD, 1, 4, 2]), score(restored, [PAD, 1, 4, 2]))
