import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hwtrigger import defense, exact

finite32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


@given(finite32)
def test_ordered_roundtrip_and_adjacency(x):
    x = np.float32(x)
    assert defense.from_ordered(defense.to_ordered(x)) == x
    up = defense.from_ordered(defense.to_ordered(x) + 1)
    if np.isfinite(np.nextafter(x, np.float32(np.inf))) and x != np.finfo(np.float32).max:
        assert up == np.nextafter(x, np.float32(np.inf))


@given(st.lists(finite32, min_size=1, max_size=20), st.integers(0, 10 ** 5), st.integers(0, 2 ** 31))
def test_ulp_perturb_bounds(xs, d, seed):
    x = np.float32(xs)
    y = defense.ulp_perturb(x, d, np.random.default_rng(seed))
    assert np.all(np.isfinite(y))
    moved = np.abs(defense.to_ordered(y) - defense.to_ordered(x))
    assert np.all(moved <= d)


def test_ulp_perturb_zero_is_identity(rng):
    x = rng.standard_normal(100).astype(np.float32)
    assert np.array_equal(defense.ulp_perturb(x, 0, rng).view(np.uint32), x.view(np.uint32))
    with pytest.raises(ValueError):
        defense.ulp_perturb(x, -1, rng)


def test_ulp_perturb_common_random_numbers(rng):
    x = rng.standard_normal(50).astype(np.float32)
    a = defense.to_ordered(defense.ulp_perturb(x, 10, np.random.default_rng(5))) - defense.to_ordered(x)
    b = defense.to_ordered(defense.ulp_perturb(x, 1000, np.random.default_rng(5))) - defense.to_ordered(x)
    assert np.all(np.abs(b - 100 * a) <= 100)


@given(finite32)
def test_bf16_matches_exact_rounding(x):
    try:
        ref = exact.round_to_format(Fraction(float(x)), exact.BFLOAT16)
    except OverflowError:
        with pytest.raises(defense.DowncastOverflowError):
            defense.downcast([x], "bf16")
        return
    assert Fraction(float(defense.round_bf16(np.float32(x)))) == ref


@given(finite32)
def test_f16_matches_exact_rounding(x):
    try:
        ref = exact.round_to_format(Fraction(float(x)), exact.BINARY16)
    except OverflowError:
        with pytest.raises(defense.DowncastOverflowError):
            defense.downcast([x], "f16")
        return
    assert Fraction(float(defense.round_f16(np.float32(x)))) == ref


def test_downcast_errors_and_idempotence(rng):
    with pytest.raises(ValueError):
        defense.downcast([1.0], "fp8")
    with pytest.raises(defense.DowncastOverflowError) as e:
        defense.downcast([1.0, 1e6, 2.0, -7e4], "f16")
    assert e.value.indices == [1, 3]
    x = rng.standard_normal(1000).astype(np.float32)
    for fmt in defense.FORMATS:
        once = defense.downcast(x, fmt)
        assert np.array_equal(defense.downcast(once, fmt).view(np.uint32), once.view(np.uint32))


def test_identity_points(mlp_setup, mlp_backdoors):
    corpus = mlp_backdoors
    base = defense.undefended(corpus)
    assert base == 1.0
    assert defense.defend_input_perturbation(corpus, [0], trials=3).rates == [base]
    assert defense.defend_batch_size(corpus, [1]).rates == [base]
    assert defense.defend_finetune(corpus, mlp_setup.dataset, [0]).rates == [base]


def test_lossless_downcast_keeps_outcome(mlp_backdoors):
    from dataclasses import replace
    for fmt in defense.FORMATS:
        rounded = [replace(r, model=defense.downcast_model(r.model, fmt)) for r in mlp_backdoors]
        rep = defense.defend_downcast(rounded, [fmt])
        assert rep.info["models_changed"][fmt] == 0
        assert rep.rates == [defense.undefended(rounded)]


def test_finetune_moves_parameters(mlp_setup, mlp_backdoors):
    r = mlp_backdoors[0]
    m = defense.finetune(r.model, mlp_setup.dataset, 1, rng=np.random.default_rng(0))
    assert not np.array_equal(m.theta(), r.model.theta())
    assert defense.finetune(r.model, mlp_setup.dataset, 3, lr=0.0) is r.model


def test_batch_outcome_bounds(mlp_backdoors):
    for r in mlp_backdoors[:2]:
        v = defense.batch_outcome(r, 2)
        assert 0.0 <= v <= 1.0
    with pytest.raises(ValueError):
        defense.batch_outcome(mlp_backdoors[0], 0)


def test_report_files(tmp_path, mlp_backdoors):
    rep = defense.defend_input_perturbation(mlp_backdoors[:2], [0, 10], trials=2, seed=1)
    rep.write_csv(tmp_path / "r.csv", {"seed": 1})
    rep.write_json(tmp_path / "r.json", {"seed": 1})
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "defense,sweep_value,backdoor_id,outcome,seed"
    assert len(lines) == 1 + 2 * 2
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["sweep"] == [0, 10] and summary["corpus_size"] == 2
