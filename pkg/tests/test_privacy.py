import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from distillbench.datasets import LabeledDataset
from distillbench.models import build_model
from distillbench.privacy import (
    MIAExperiment,
    compute_auc,
    load_mia_result,
    mia_score,
    run_mia,
    save_mia_result,
)


def brute_force_auc(members, nonmembers):
    """Independent oracle: exhaustive pair counting with ties at one half."""
    wins = 0.0
    for m in members:
        for n in nonmembers:
            if m > n:
                wins += 1.0
            elif m == n:
                wins += 0.5
    return wins / (len(members) * len(nonmembers))


def test_auc_spec_example():
    # pairs: (.9,.8) win, (.9,.2) win, (.7,.8) loss, (.7,.2) win -> 3/4
    assert compute_auc([0.9, 0.7], [0.8, 0.2]) == pytest.approx(0.75)
    assert brute_force_auc([0.9, 0.7], [0.8, 0.2]) == pytest.approx(0.75)


def test_auc_identical_distributions():
    scores = [0.1, 0.5, 0.9]
    assert compute_auc(scores, scores) == pytest.approx(0.5)


def test_auc_perfect_separation():
    assert compute_auc([2.0, 3.0], [0.0, 1.0]) == pytest.approx(1.0)
    assert compute_auc([0.0, 1.0], [2.0, 3.0]) == pytest.approx(0.0)


def test_auc_empty_side():
    with pytest.raises(ValueError):
        compute_auc([], [1.0])
    with pytest.raises(ValueError):
        compute_auc([1.0], [])


def test_auc_matches_brute_force_200x200():
    rng = np.random.default_rng(0)
    members = rng.normal(0.5, 1.0, 200)
    nonmembers = rng.normal(0.0, 1.0, 200)
    # inject exact ties
    members[:20] = nonmembers[:20]
    assert compute_auc(members, nonmembers) == pytest.approx(
        brute_force_auc(members, nonmembers), abs=1e-12
    )


@settings(max_examples=50, deadline=None)
@given(
    members=st.lists(st.integers(-5, 5), min_size=1, max_size=30),
    nonmembers=st.lists(st.integers(-5, 5), min_size=1, max_size=30),
)
def test_auc_property_matches_oracle(members, nonmembers):
    assert compute_auc(members, nonmembers) == pytest.approx(
        brute_force_auc(members, nonmembers), abs=1e-12
    )


def test_auc_monotone_transform_invariant():
    rng = np.random.default_rng(1)
    members = rng.normal(0.5, 1.0, 50)
    nonmembers = rng.normal(0.0, 1.0, 60)
    base = compute_auc(members, nonmembers)
    assert compute_auc(np.exp(members), np.exp(nonmembers)) == pytest.approx(base)
    assert compute_auc(3 * members + 7, 3 * nonmembers + 7) == pytest.approx(base)


def test_mia_score_closed_forms():
    model = build_model("mlp", 10, (1, 8, 8), seed=0)
    x = torch.rand(1, 8, 8)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    # uniform output over 10 classes -> score = -log 10
    assert mia_score(model, x, 3) == pytest.approx(-math.log(10), abs=1e-5)
    with torch.no_grad():
        model.head.bias[3] = 50.0
    # probability ~1 on the true label -> score ~0 (the maximum)
    assert mia_score(model, x, 3) == pytest.approx(0.0, abs=1e-6)
    with torch.no_grad():
        model.head.bias.zero_()
        model.head.bias[3] = math.log(9.0)  # p(true) = 9 / (9 + 9) = 0.5
    assert mia_score(model, x, 3) == pytest.approx(-math.log(2), abs=1e-5)


def test_mia_score_label_out_of_range():
    model = build_model("mlp", 2, (1, 8, 8), seed=0)
    with pytest.raises(ValueError):
        mia_score(model, torch.rand(1, 8, 8), 5)


def test_untrained_model_auc_near_half(blobs_full):
    train, _ = blobs_full
    aucs = []
    for seed in range(3):
        model = build_model("convnet3", 10, train.image_shape, seed=seed)
        model.set_normalization(train.mean, train.std)
        members = train.subset(torch.arange(0, len(train), 2))
        nonmembers = train.subset(torch.arange(1, len(train), 2))
        result = run_mia(MIAExperiment(model=model, members=members, nonmembers=nonmembers))
        aucs.append(result.auc)
    assert abs(float(np.mean(aucs)) - 0.5) <= 0.02


def test_mia_result_roundtrip(tmp_path, blobs_tiny):
    train, _ = blobs_tiny
    model = build_model("convnet3", 10, train.image_shape, seed=0)
    members = train.subset(torch.arange(0, 100))
    nonmembers = train.subset(torch.arange(100, 200))
    result = run_mia(MIAExperiment(model=model, members=members, nonmembers=nonmembers,
                                   method="gradient-match", origin_per_class=10))
    path = str(tmp_path / "mia.json")
    save_mia_result(result, path)
    loaded = load_mia_result(path)
    assert loaded.auc == pytest.approx(result.auc)
    assert loaded.descriptor["method"] == "gradient-match"
    assert len(loaded.member_scores) == len(result.member_scores)
