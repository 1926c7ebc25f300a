import math

import numpy as np
import pytest
import torch

from recdistill.distill import (
    DistillConfig,
    check_cache,
    make_soft_labels,
    run_record,
    soft_label_entropy,
    student_loss,
    train_base,
    train_student,
)
from recdistill.errors import ConsistencyError, ParameterError
from recdistill.seqmodel import cross_entropy_loss
from recdistill.teacher import SoftLogitCache, train_popularity_baseline


def test_soft_label_examples():
    r = make_soft_labels([0.0, 0.0], 1, temperature=1.0)
    assert r.tolist() == pytest.approx([0.75, 0.25])
    r = make_soft_labels([2.0, 0.0, 0.0], 3, temperature=1.0)
    z = math.exp(2) + 2
    assert r.tolist() == pytest.approx([0.5 * math.exp(2) / z, 0.5 / z, 0.5 / z + 0.5])


def test_high_temperature_flattens_teacher_part():
    r = make_soft_labels([5.0, -3.0, 1.0, 0.0], 2, temperature=1e6)
    assert r.tolist() == pytest.approx([0.125, 0.625, 0.125, 0.125], abs=1e-5)


def test_soft_labels_are_distributions_with_a_heavy_target():
    gen = torch.Generator().manual_seed(0)
    e_u = torch.randn(10_000, 8, generator=gen, dtype=torch.float64) * 3
    targets = torch.randint(1, 9, (10_000,), generator=gen)
    for temperature in (0.05, 0.5, 1.0, 5.0):
        r = make_soft_labels(e_u, targets, temperature)
        assert torch.allclose(r.sum(-1), torch.ones(10_000, dtype=torch.float64))
        assert (r >= 0).all()
        assert (r.gather(1, (targets - 1).unsqueeze(1)) >= 0.5).all()


def test_entropy_grows_with_temperature():
    e_u = [3.0, 1.0, 0.5, -2.0]
    grid = (0.1, 0.5, 1.0, 2.0, 3.0, 6.0, 9.0, 10.0)
    entropies = [float(soft_label_entropy(e_u, t)) for t in grid]
    assert all(a < b for a, b in zip(entropies, entropies[1:]))
    assert entropies[-1] < math.log(4)


def test_bad_temperature():
    with pytest.raises(ParameterError):
        make_soft_labels([0.0, 1.0], 1, temperature=0.0)
    with pytest.raises(ParameterError):
        DistillConfig(temperature=-1.0)
    with pytest.raises(ParameterError):
        DistillConfig(beta=1.5)


def test_beta_zero_is_cross_entropy():
    logits = torch.randn(4, 6)
    targets = torch.tensor([1, 2, 6, 3])
    r = make_soft_labels(torch.randn(4, 6), targets, 2.0).float()
    assert torch.equal(student_loss(logits, targets, r, 0.0), cross_entropy_loss(logits, targets))


def test_beta_one_with_matching_student_is_zero():
    logits = torch.tensor([0.2, 1.5, -0.3], dtype=torch.float64)
    r = torch.softmax(logits, -1)
    assert float(student_loss(logits, 2, r, 1.0)) == pytest.approx(0.0, abs=1e-12)


def test_student_loss_brute_force():
    logits = torch.tensor([1.0, 0.0, -1.0], dtype=torch.float64)
    e_u = torch.tensor([0.5, 0.5, 2.0], dtype=torch.float64)
    r = make_soft_labels(e_u, 1, 2.0)
    z = sum(math.exp(v) for v in logits.tolist())
    p = [math.exp(v) / z for v in logits.tolist()]
    ce = -math.log(p[0])
    kl = sum(a * math.log(a / b) for a, b in zip(p, r.tolist()))
    kl_rev = sum(b * math.log(b / a) for a, b in zip(p, r.tolist()))
    assert float(student_loss(logits, 1, r, 0.3)) == pytest.approx(0.7 * ce + 0.3 * kl, abs=1e-12)
    assert float(student_loss(logits, 1, r, 0.3, "teacher_first")) == pytest.approx(
        0.7 * ce + 0.3 * kl_rev, abs=1e-12)


def test_student_loss_is_positive_and_differentiable():
    gen = torch.Generator().manual_seed(1)
    logits = torch.randn(3, 5, generator=gen, dtype=torch.float64, requires_grad=True)
    targets = torch.tensor([2, 5, 1])
    r = make_soft_labels(torch.randn(3, 5, generator=gen, dtype=torch.float64), targets, 1.0)
    for beta in (0.1, 0.5, 0.9):
        assert float(student_loss(logits, targets, r, beta)) > 0
    assert torch.autograd.gradcheck(lambda x: student_loss(x, targets, r, 0.5), (logits,),
                                    eps=1e-5, atol=1e-8, rtol=1e-3)


def test_short_cache_is_rejected(toy_data):
    log, parts, _ = toy_data
    train = parts["train"]
    cache = SoftLogitCache(np.zeros((len(train) - 1, log.catalog_size)), "model_level", 1, "0" * 64)
    with pytest.raises(ConsistencyError):
        check_cache(cache, train, log.catalog_size)
    wide = SoftLogitCache(np.zeros((len(train), log.catalog_size + 1)), "model_level", 1, "0" * 64)
    with pytest.raises(ConsistencyError):
        check_cache(wide, train, log.catalog_size)


def test_beta_zero_student_matches_base(toy_data, tiny_spec, tiny_train):
    log, parts, _ = toy_data
    cache = train_popularity_baseline(parts["train"], log.catalog_size).cache
    cfg = DistillConfig(temperature=2.0, beta=0.0, seed=5)
    student = train_student(tiny_spec, cache, cfg, parts["train"], parts["valid"], tiny_train)
    base = train_base(tiny_spec, parts["train"], parts["valid"], tiny_train, seed=5)
    assert [(r.train_loss, r.valid_ndcg10) for r in student.trace] == \
        [(r.train_loss, r.valid_ndcg10) for r in base.trace]
    for name, value in student.model.state_dict().items():
        assert torch.equal(value, base.model.state_dict()[name]), name


def test_student_with_teacher_trains(toy_data, tiny_spec, tiny_train):
    log, parts, _ = toy_data
    cache = train_popularity_baseline(parts["train"], log.catalog_size).cache
    cfg = DistillConfig(temperature=1.5, beta=0.5, seed=1)
    result = train_student(tiny_spec, cache, cfg, parts["train"], parts["valid"], tiny_train)
    assert all(math.isfinite(r.train_loss) for r in result.trace)
    record = run_record(cache, cfg)
    assert record["provenance"] == "popularity_baseline" and record["beta"] == 0.5
