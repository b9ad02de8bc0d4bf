import numpy as np
import pytest

from byzsim.attacks import (AdversaryView, ALittleIsEnough, BitFlipping,
                            InnerProductManipulation, LabelFlipping, Mimic, craft)
from byzsim.core import RngStream
from byzsim.harness import ExperimentConfig, run


def _view(honest, byz, grads=None):
    return AdversaryView(honest_aggregands=honest,
                         honest_gradients=grads or honest,
                         byz_aggregands=byz, num_byz=len(byz))


def test_bit_flipping_negates_shadow():
    v = np.array([1.0, -2.0, 0.5])
    out = craft(BitFlipping(), _view([np.zeros(3)], [v]))
    assert np.array_equal(out[0], -v)


def test_label_flipping_passes_shadow_through():
    v = np.array([0.25, 4.0])
    out = craft(LabelFlipping(), _view([np.ones(2)], [v]))
    assert np.array_equal(out[0], v)


def test_mimic_passes_shadow_through():
    v = np.array([3.0])
    out = craft(Mimic(), _view([np.zeros(1)], [v, v]))
    assert all(np.array_equal(o, v) for o in out)


def test_ipm_unit_strength_on_identical_honest():
    v = np.array([0.5, -1.5])
    out = craft(InnerProductManipulation(z=1.0),
                _view([v.copy() for _ in range(4)], [np.zeros(2)] * 2))
    assert all(np.array_equal(o, -v) for o in out)


def test_ipm_requires_positive_strength():
    with pytest.raises(ValueError):
        InnerProductManipulation(z=0.0)


def test_alie_hand_example():
    honest = [np.array([0.0]), np.array([2.0])]
    out = craft(ALittleIsEnough(z=1.0), _view(honest, [np.zeros(1)]))
    assert out[0][0] == 0.0  # mu = 1, population sigma = 1


def test_coordinated_attacks_identical_across_byzantines():
    rng = RngStream(3)
    honest = [rng.standard_normal(size=4) for _ in range(5)]
    byz = [rng.standard_normal(size=4) for _ in range(3)]
    for attack in (InnerProductManipulation(z=0.3), ALittleIsEnough(z=1.06)):
        out = craft(attack, _view(honest, byz))
        assert len(out) == 3
        assert all(np.array_equal(out[0], o) for o in out[1:])


def test_crafted_vectors_finite():
    rng = RngStream(4)
    honest = [rng.standard_normal(size=6) for _ in range(4)]
    byz = [rng.standard_normal(size=6) for _ in range(2)]
    for attack in (BitFlipping(), LabelFlipping(),
                   InnerProductManipulation(z=5.0), ALittleIsEnough(z=3.0)):
        for v in craft(attack, _view(honest, byz)):
            assert np.all(np.isfinite(v))


def test_empty_view_rejected():
    with pytest.raises(ValueError):
        craft(BitFlipping(), _view([], [np.zeros(1)]))


def test_label_flip_degenerates_on_zero_features(tmp_path):
    # With every a_i = 0 the logistic terms ignore labels, so a label
    # flipping run matches a no-attack run row for row.
    path = tmp_path / "zeros.txt"
    lines = []
    for i in range(12):
        label = 1 if i % 2 == 0 else -1
        lines.append(f"{label} 3:0.0")
    path.write_text("\n".join(lines) + "\n")
    base = dict(dataset=str(path), n=4, n_byz=1, rounds=8, metrics_every=1,
                partition="homogeneous", regularizer="nonconvex", lam=0.1,
                compressor="randk", k=1, algo="marina2", seed=5,
                stepsize_mode="explicit", gamma=0.05, aggregator="cm")
    flipped = run(ExperimentConfig(attack="lf", **base))
    honest = run(ExperimentConfig(attack="none", **base))
    assert flipped.rows == honest.rows
