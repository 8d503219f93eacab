import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from spoofattr import models
from spoofattr.models import (
    Checkpoint, ClassifierHead, LMCLHead, LMCLParams, ModelError, ResNetBackbone, ResNetConfig,
)
from spoofattr.protocol import EmbeddingSet

from oracles import ce_oracle

TINY = ResNetConfig(in_coeffs=12, blocks=(1, 1), channels=(8, 8), embed_dim=6)


def _fd_lmcl(x, y, params, which, h=1e-5):
    base = {"x": x, "w": params.weight}[which]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        if which == "x":
            lp = models.lmcl_loss(plus, y, params)
            lm = models.lmcl_loss(minus, y, params)
        else:
            lp = models.lmcl_loss(x, y, LMCLParams(plus, params.scale, params.margin))
            lm = models.lmcl_loss(x, y, LMCLParams(minus, params.scale, params.margin))
        grad[idx] = (lp - lm) / (2 * h)
    return grad


def _rel_err(a, b, floor=1e-12):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


class TestLMCL:
    def test_margin_free_reduction_to_cosine_ce(self):
        rng = np.random.default_rng(0)
        x, w = rng.standard_normal((8, 5)), rng.standard_normal((4, 5))
        y = rng.integers(0, 4, 8)
        cos = (x / np.linalg.norm(x, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
        got = models.lmcl_loss(x, y, LMCLParams(w, 1.0, 0.0))
        assert abs(got - float(ce_oracle(cos, y))) < 1e-9

    def test_two_class_closed_form(self):
        x = np.array([[2.0, 0.0]])
        w = np.array([[1.0, 0.0], [0.0, 3.0]])
        got = models.lmcl_loss(x, [0], LMCLParams(w, 30.0, 0.35))
        with mpmath.workdps(50):
            a = mpmath.mpf(30) * (1 - mpmath.mpf("0.35"))
            want = -mpmath.log(mpmath.exp(a) / (mpmath.exp(a) + 1))
        assert abs(got - float(want)) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x, w = rng.standard_normal((4, 6)), rng.standard_normal((3, 6))
        y = rng.integers(0, 3, 4)
        params = LMCLParams(w, 30.0, 0.35)
        _, gx, gw = models.lmcl_loss(x, y, params, with_grad=True)
        assert _rel_err(gx, _fd_lmcl(x, y, params, "x")) < 1e-4
        assert _rel_err(gw, _fd_lmcl(x, y, params, "w")) < 1e-4

    def test_torch_head_agrees_with_numpy(self):
        rng = np.random.default_rng(1)
        head = LMCLHead(5, 3).double()
        x = rng.standard_normal((6, 5))
        y = rng.integers(0, 3, 6)
        got = head.loss(torch.from_numpy(x), torch.from_numpy(y)).item()
        want = models.lmcl_loss(x, y, LMCLParams(head.weight.detach().numpy(), 30.0, 0.35))
        assert abs(got - want) < 1e-9

    def test_renormalization_after_update(self):
        torch.manual_seed(0)
        head = LMCLHead(8, 4)
        opt = torch.optim.SGD(head.parameters(), lr=0.5)
        for _ in range(3):
            loss = head.loss(torch.randn(10, 8), torch.randint(0, 4, (10,)))
            opt.zero_grad()
            loss.backward()
            opt.step()
            head.renormalize_()
            assert torch.allclose(head.weight.norm(dim=1), torch.ones(4), atol=1e-6)

    def test_errors(self):
        with pytest.raises(ModelError):
            models.lmcl_loss(np.zeros((1, 2)), [0], LMCLParams(np.eye(2)))
        with pytest.raises(ModelError):
            models.lmcl_loss(np.ones((1, 2)), [2], LMCLParams(np.eye(2)))
        with pytest.raises(ModelError):
            LMCLParams(np.eye(2), 0.0)
        with pytest.raises(ModelError):
            LMCLParams(np.eye(2), 30.0, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), s1=st.floats(0.1, 100), s2=st.floats(0.1, 100))
    def test_argmax_invariant_to_scale(self, seed, s1, s2):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((5, 4))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        x = rng.standard_normal(4)
        x /= np.linalg.norm(x)
        y = int(rng.integers(5))
        shifted = w @ x - 0.35 * (np.arange(5) == y)
        assert np.argmax(s1 * shifted) == np.argmax(s2 * shifted)


class TestHeads:
    def test_identity_head(self):
        head = ClassifierHead(np.eye(3), np.zeros(3), ["a", "b", "c"])
        v = np.array([0.5, -1.0, 2.0])
        np.testing.assert_array_equal(models.head_logits(head, v), v)

    def test_zero_head_is_uniform(self):
        head = ClassifierHead(np.zeros((4, 3)), np.zeros(4), list("abcd"))
        np.testing.assert_allclose(models.softmax(models.head_logits(head, np.ones(3))), 0.25)

    def test_matches_matrix_product(self):
        rng = np.random.default_rng(2)
        w, b, v = rng.standard_normal((5, 7)), rng.standard_normal(5), rng.standard_normal(7)
        want = [sum(w[i, j] * v[j] for j in range(7)) + b[i] for i in range(5)]
        got = models.head_logits(ClassifierHead(w, b, list("abcde")), v)
        assert np.max(np.abs(got - want)) < 1e-9

    def test_dim_mismatch(self):
        with pytest.raises(ModelError):
            models.head_logits(ClassifierHead(np.eye(3), np.zeros(3), list("abc")), np.ones(4))
        with pytest.raises(ModelError):
            ClassifierHead(np.eye(3), np.zeros(3), list("ab"))

    def test_mlp_head_exports(self):
        head = models.MLPHead(4, 3)
        ch = head.as_classifier_head(list("abc"))
        x = torch.randn(4)
        np.testing.assert_allclose(models.head_logits(ch, x.numpy()), head(x).detach().numpy(), atol=1e-6)
        with pytest.raises(ModelError):
            models.MLPHead(4, 3, hidden=(8,)).as_classifier_head(list("abc"))


class TestCE:
    def test_uniform(self):
        assert models.ce_loss(np.zeros((3, 7)), [0, 3, 6]) == pytest.approx(math.log(7), abs=1e-12)

    def test_saturated(self):
        assert models.ce_loss([[1000.0, 0.0, 0.0]], [0]) < 1e-12

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((20, 6)) * 10
        y = rng.integers(0, 6, 20)
        assert abs(models.ce_loss(logits, y) - float(ce_oracle(logits, y))) < 1e-9

    def test_invalid_label(self):
        with pytest.raises(ModelError):
            models.ce_loss(np.zeros((1, 2)), [5])


class TestPredict:
    def _fixture(self, vec):
        return models.FixtureProvider(EmbeddingSet(("u",), np.atleast_2d(vec)))

    def test_hand_softmax(self):
        head = ClassifierHead(np.eye(2), np.zeros(2), ["x", "y"])
        name, probs = models.predict(self._fixture([3.0, -1.0]), head, "u")
        assert name == "x"
        np.testing.assert_allclose(probs, [1 / (1 + math.exp(-4)), 1 / (1 + math.exp(4))], atol=1e-12)
        assert round(probs[0], 3) == 0.982

    def test_tie_goes_to_lowest_index(self):
        head = ClassifierHead(np.zeros((3, 2)), np.zeros(3), ["p", "q", "r"])
        assert models.predict(self._fixture([1.0, 1.0]), head, "u")[0] == "p"

    def test_lmcl_scorer(self):
        params = LMCLParams(np.array([[0.0, 1.0], [1.0, 0.0]]))
        name, probs = models.predict(self._fixture([2.0, 0.1]), (params, ["a", "b"]), "u")
        assert name == "b" and abs(probs.sum() - 1) < 1e-9

    def test_mismatch(self):
        head = ClassifierHead(np.eye(3), np.zeros(3), list("abc"))
        with pytest.raises(ModelError):
            models.predict(self._fixture([1.0, 2.0]), head, "u")
        with pytest.raises(ModelError):
            models.predict(self._fixture([1.0, 2.0]), (LMCLParams(np.eye(2)), ["a"]), "u")

    def test_unknown_fixture_id(self):
        with pytest.raises(ModelError):
            self._fixture([1.0]).embed("v")

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_probabilities_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        head = ClassifierHead(rng.standard_normal((4, 3)) * 20, rng.standard_normal(4), list("abcd"))
        _, probs = models.predict(self._fixture(rng.standard_normal(3)), head, "u")
        assert abs(probs.sum() - 1) < 1e-9


class TestBackbone:
    def test_pooling_shape_law(self):
        torch.manual_seed(0)
        model = ResNetBackbone(ResNetConfig(in_coeffs=60, blocks=(1, 1), channels=(8, 16), embed_dim=32))
        rng = np.random.default_rng(0)
        for t in (399, 200):
            assert models.backbone_embed(model, rng.standard_normal((t, 60))).shape == (32,)

    def test_zero_features_finite(self):
        model = ResNetBackbone(TINY)
        assert np.all(np.isfinite(models.backbone_embed(model, np.zeros((20, 12)))))

    def test_repeatable(self):
        model = ResNetBackbone(TINY)
        x = np.random.default_rng(1).standard_normal((30, 12))
        np.testing.assert_array_equal(models.backbone_embed(model, x), models.backbone_embed(model, x))

    def test_width_mismatch_and_nonfinite(self):
        model = ResNetBackbone(TINY)
        with pytest.raises(ModelError):
            models.backbone_embed(model, np.zeros((20, 13)))
        with pytest.raises(ModelError):
            models.backbone_embed(model, np.full((20, 12), np.nan))

    def test_nonfinite_activation_names_layer(self):
        model = ResNetBackbone(TINY)
        with torch.no_grad():
            model.stages[1][0].conv1.weight.fill_(float("inf"))
        model.eval()
        with pytest.raises(ModelError, match="stage1"):
            model(torch.ones(1, 20, 12), check_finite=True)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        cfg = ResNetConfig(in_coeffs=6, blocks=(1, 1), channels=(8, 8), embed_dim=4)
        model = ResNetBackbone(cfg).double()
        x = torch.randn(3, 9, 6, dtype=torch.float64, requires_grad=True)
        probe = torch.randn(3, 4, dtype=torch.float64)

        def objective():
            return (model(x) * probe).sum()

        objective().backward()
        checked = [("input", x)] + [(n, p) for n, p in model.named_parameters()]
        worst = 0.0
        h = 1e-6
        for name, tensor in checked:
            analytic = tensor.grad.detach().clone().numpy().ravel()
            flat = tensor.data.view(-1)
            picks = np.random.default_rng(len(name)).choice(flat.numel(), min(12, flat.numel()), replace=False)
            numeric = []
            with torch.no_grad():
                for i in picks:
                    old = flat[i].item()
                    flat[i] = old + h
                    up = objective().item()
                    flat[i] = old - h
                    down = objective().item()
                    flat[i] = old
                    numeric.append((up - down) / (2 * h))
            # the embed bias is cancelled by the batch norm after it, so its true gradient is 0
            worst = max(worst, _rel_err(analytic[picks], np.array(numeric), floor=1e-3))
        assert worst < 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        ck = Checkpoint({"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(2, np.float32)},
                        {"kind": "e2e"}, ["x", "y"], {"seed": 1}, [{"epoch": 0}], {"epoch": 0})
        path = models.save_checkpoint(ck, tmp_path / "c.npz")
        back = models.load_checkpoint(path)
        assert back.class_names == ["x", "y"] and back.config == {"kind": "e2e"}
        assert back.digest() == ck.digest() and back.digest("a.") != back.digest("b")
        assert path.read_bytes() == models.save_checkpoint(back, tmp_path / "d.npz").read_bytes()

    def test_state_round_trip(self):
        a, b = ResNetBackbone(TINY), ResNetBackbone(TINY)
        models.params_to_state(b, models.state_to_params(a, "bb"), "bb")
        x = torch.randn(2, 15, 12)
        a.eval(), b.eval()
        assert torch.equal(a(x), b(x))
        with pytest.raises(ModelError):
            models.params_to_state(b, {}, "bb")

    def test_config_dict(self):
        assert models.resnet_config_from(models.resnet_config_dict(TINY)) == TINY
