import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from objsep import miml
from objsep.miml import BasisBag, Hyper, LabelSet, TrainConfig

from oracles import central_difference, random_bags, randomized_params, relative_error

SMALL = Hyper(k=2, l=4, m=3, f=12, hidden=16)


# ---------------------------------------------------------------------------
# parameters and forward pass
# ---------------------------------------------------------------------------


class TestInit:
    def test_deterministic(self):
        a = miml.init_params(SMALL, 3)
        b = miml.init_params(SMALL, 3)
        for k in a.arrays:
            assert np.array_equal(a[k], b[k])

    def test_full_scale_shapes(self):
        p = miml.init_params(Hyper(k=4, l=25, m=25, f=2401), 0)
        assert p["conv_w"].shape == (100, 1024)
        assert p["fc_w"].shape == (1024, 2401)
        assert np.all(p["bn1_var"] == 1) and np.all(p["bn2_mean"] == 0)

    def test_weight_mean_near_zero(self):
        w = miml.init_params(Hyper(k=4, l=25, m=25, f=2401), 1)["fc_w"].ravel()
        assert w.size >= 10 ** 5
        assert abs(w.mean()) < 3 * w.std() / np.sqrt(w.size)


class TestForward:
    def test_zero_params(self):
        p = miml.init_params(SMALL, 0)
        for k in miml.PARAM_NAMES:
            p.arrays[k][:] = 0
        r = miml.forward(random_bags(SMALL, 1, 0)[0], p)
        assert not np.any(r.cube) and not np.any(r.scores)

    def test_full_scale_shapes(self):
        hp = Hyper(k=4, l=25, m=25, f=2401)
        bag = BasisBag(np.random.default_rng(0).uniform(0, 1, (25, 2401)), [0])
        r = miml.forward(bag, miml.init_params(hp, 0))
        assert r.cube.shape == (4, 25, 25)
        assert r.map.shape == (25, 25)
        assert r.scores.shape == (25,)

    def test_pooling_consistency(self):
        p = randomized_params(SMALL, 0)
        for mode in ("eval", "train"):
            r = miml.forward(random_bags(SMALL, 1, 1)[0], p, mode)
            np.testing.assert_array_equal(r.map, r.cube.max(axis=0))
            np.testing.assert_array_equal(r.scores, r.map.max(axis=1))

    def test_duplicated_basis(self):
        p = randomized_params(SMALL, 1)
        v = np.random.default_rng(2).uniform(0, 1, SMALL.f)
        r = miml.forward(BasisBag(np.tile(v, (SMALL.m, 1)), [0]), p)
        for m in range(1, SMALL.m):
            np.testing.assert_array_equal(r.map[:, m], r.map[:, 0])
        np.testing.assert_array_equal(r.scores, r.map[:, 0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            miml.forward(BasisBag(np.ones((3, 11)), [0]), miml.init_params(SMALL, 0))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        p = randomized_params(SMALL, seed % 7)
        bag = random_bags(SMALL, 1, seed)[0]
        perm = np.random.default_rng(seed).permutation(SMALL.m)
        a = miml.forward(bag, p)
        b = miml.forward(BasisBag(bag.bases[perm], bag.labels), p)
        np.testing.assert_allclose(b.scores, a.scores, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(b.map, a.map[:, perm], rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# hinge loss
# ---------------------------------------------------------------------------


class TestHingeLoss:
    def test_all_zero_scores(self):
        assert miml.hinge_loss(np.zeros(25), [3]) == pytest.approx(24 / 25, abs=1e-12)

    def test_margin_satisfied(self):
        assert miml.hinge_loss(np.array([2.0, 0.5, 1.0]), [0]) == 0.0

    def test_hand_example(self):
        loss = miml.hinge_loss(np.array([0.5, 0.2, -0.4]), [0])
        assert loss == pytest.approx((0.7 + 0.1) / 3, abs=1e-12)

    def test_empty_labels(self):
        with pytest.raises(ValueError):
            miml.hinge_loss(np.zeros(4), [])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=10), st.data())
    def test_bounds(self, scores, data):
        a = np.array(scores)
        n = len(a)
        pos = data.draw(st.sets(st.integers(0, n - 1), min_size=1, max_size=n - 1))
        loss = miml.hinge_loss(a, pos)
        span = a.max() - a.min()
        assert 0 <= loss <= len(pos) * (n - len(pos)) * (1 + span) / n + 1e-12
        neg = [i for i in range(n) if i not in pos]
        satisfied = all(a[j] - a[i] >= 1 for j in pos for i in neg)
        assert (loss == 0) == satisfied

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=10), st.data(), st.floats(0, 3))
    def test_raising_positive_never_hurts(self, scores, data, bump):
        a = np.array(scores)
        pos = data.draw(st.sets(st.integers(0, len(a) - 1), min_size=1, max_size=len(a) - 1))
        j = data.draw(st.sampled_from(sorted(pos)))
        b = a.copy()
        b[j] += bump
        assert miml.hinge_loss(b, pos) <= miml.hinge_loss(a, pos) + 1e-12


def test_label_set_rejects_duplicates():
    with pytest.raises(ValueError):
        LabelSet([1, 1])


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


class TestBackward:
    def test_zero_loss_zero_gradient(self):
        p = randomized_params(SMALL, 2)
        bag = random_bags(SMALL, 1, 3)[0]
        p.arrays["bn2_beta"][:] = 0.0
        # label 0 (all sub-concepts) pushed far above the rest
        for k in range(SMALL.k):
            p.arrays["bn2_beta"][k * SMALL.l + 0] = 50.0
        bag = BasisBag(bag.bases, [0])
        assert miml.batch_loss(bag, p) == 0.0
        for g in miml.backward(bag, p).values():
            assert not np.any(g)

    def test_idle_basis_gets_no_gradient(self):
        p = randomized_params(SMALL, 3)
        bag = random_bags(SMALL, 1, 4)[0]
        rows = miml.normalize_bases(bag.bases)
        r = miml.forward(bag, p)
        winners = set(np.argmax(r.map, axis=1))
        idle = [m for m in range(SMALL.m) if m not in winners]
        if not idle:
            pytest.skip("every basis wins a label for this draw")
        # gradient w.r.t. the idle branch input, by finite differences on the input
        m = idle[0]
        for f in range(SMALL.f):
            x = bag.bases.copy()
            x[m, f] += 1e-6
            assert miml.batch_loss(BasisBag(x, bag.labels), p) == pytest.approx(
                miml.batch_loss(bag, p), abs=1e-14)
        assert rows.shape == bag.bases.shape

    @pytest.mark.parametrize("mode", ["eval", "train"])
    def test_finite_differences(self, mode):
        p = randomized_params(SMALL, 4)
        bags = random_bags(SMALL, 3, 5)
        _, grads, _ = miml.loss_and_grads(bags, p, mode)
        for name in miml.PARAM_NAMES:
            fd = central_difference(bags, p, name, mode=mode)
            assert relative_error(grads[name], fd) < 1e-4, name


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class TestTrain:
    def test_lr_schedule(self):
        cfg = TrainConfig()
        assert cfg.lr_at(10) == pytest.approx(0.001 * 0.94 ** 2)
        assert cfg.lr_at(4) == 0.001

    def test_full_scale_config(self):
        c = miml.FULL_SCALE_TRAIN_CONFIG
        assert (c.batch_size, c.epochs, c.weight_decay, c.lr) == (256, 300, 1e-5, 1e-3)

    def test_overfit_single_bag(self):
        hp = Hyper(k=2, l=6, m=5, f=40, hidden=64)
        bag = random_bags(hp, 1, 0)[0]
        state = miml.train([bag], TrainConfig(epochs=200, batch_size=1), hp)
        assert len(state.history) == 200 and state.step == 200
        assert state.history[-1] <= 0.1 * state.history[0]

    def test_deterministic_and_resumable(self):
        hp = Hyper(k=2, l=5, m=4, f=20, hidden=32)
        bags = random_bags(hp, 10, 1)
        cfg = TrainConfig(epochs=4, batch_size=4, seed=3)
        full = miml.train(bags, cfg, hp)
        again = miml.train(bags, cfg, hp)
        half = miml.train(bags, cfg, hp, epochs=2)
        resumed = miml.train(bags, cfg, state=half)
        for k in full.params.arrays:
            assert np.array_equal(full.params[k], again.params[k])
            assert np.array_equal(full.params[k], resumed.params[k])
        assert full.history == resumed.history

    def test_running_stats_update(self):
        hp = Hyper(k=2, l=5, m=4, f=20, hidden=32)
        state = miml.train(random_bags(hp, 4, 2), TrainConfig(epochs=1, batch_size=4), hp)
        assert not np.allclose(state.params["bn1_mean"], 0.0)
        assert np.all(state.params["bn1_var"] > 0)

    def test_validation_selection(self):
        hp = Hyper(k=2, l=5, m=4, f=20, hidden=32)
        bags, val = random_bags(hp, 12, 4), random_bags(hp, 6, 5)
        state = miml.train(bags, TrainConfig(epochs=30, batch_size=4, patience=3), hp, val=val)
        assert len(state.val_history) == state.epoch == len(state.history)
        best = int(np.argmin(state.val_history))
        assert state.best_epoch == best
        # stopped exactly `patience` epochs after the best one, or ran out of epochs
        assert state.epoch == 30 or state.epoch == best + 1 + 3
        assert miml.evaluate_loss(val, state.selected) == pytest.approx(state.val_history[best])

    def test_validation_resume(self):
        hp = Hyper(k=2, l=5, m=4, f=20, hidden=32)
        bags, val = random_bags(hp, 10, 6), random_bags(hp, 4, 7)
        cfg = TrainConfig(epochs=6, batch_size=4, patience=50)
        full = miml.train(bags, cfg, hp, val=val)
        resumed = miml.train(bags, cfg, state=miml.train(bags, cfg, hp, epochs=3, val=val),
                             val=val)
        assert full.val_history == resumed.val_history
        assert full.best_epoch == resumed.best_epoch
        for k in full.params.arrays:
            assert np.array_equal(full.selected[k], resumed.selected[k])

    def test_no_validation_selects_latest(self):
        hp = Hyper(k=2, l=5, m=4, f=20, hidden=32)
        state = miml.train(random_bags(hp, 4, 8), TrainConfig(epochs=2, patience=1), hp)
        assert state.selected is state.params and state.val_history == []

    def test_rejects_unlabelled(self):
        hp = Hyper(k=2, l=5, m=4, f=20, hidden=32)
        bags = random_bags(hp, 2, 3)
        bags.append(BasisBag(np.ones((4, 20)), [], "empty"))
        with pytest.raises(ValueError, match="no labels"):
            miml.train(bags, TrainConfig(epochs=1), hp)

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="empty"):
            miml.train([], TrainConfig(epochs=1))
