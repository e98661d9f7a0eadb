import numpy as np
import pytest

from deblur_mim import tensor as T
from deblur_mim.model import ViTConfig, classify, init_weights, reconstruct
from deblur_mim.patching import patchify, random_mask

from conftest import check_grads, numeric_grad, rel_err


def _project(out: T.Tensor, seed: int = 7) -> T.Tensor:
    """Scalarize with a fixed random weighting so every output entry matters."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return T.sum_(T.mul(out, T.Tensor(r)))


class TestOpGradients:
    def test_add_sub_mul_broadcast(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        check_grads(lambda x, y: _project(T.add(x, y)), [a, b])
        check_grads(lambda x, y: _project(T.sub(x, y)), [a, b])
        check_grads(lambda x, y: _project(T.mul(x, y)), [a, b])

    def test_scale_and_operators(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        check_grads(lambda x, y: _project(-(x * 2.5) + y - x * y), [a, b])

    def test_matmul_batched(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        check_grads(lambda x, y: _project(T.matmul(x, y)), [a, b])

    def test_linear(self, rng):
        x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5,))
        check_grads(lambda *t: _project(T.linear(*t)), [x, w, b])

    def test_shape_ops(self, rng):
        a = rng.normal(size=(2, 3, 4))
        check_grads(lambda x: _project(T.transpose(x)), [a])
        check_grads(lambda x: _project(T.permute(x, (1, 2, 0))), [a])
        check_grads(lambda x: _project(T.reshape(x, (6, 4))), [a])
        check_grads(lambda x: _project(T.expand(T.reshape(x, (1, 24)), (3, 24))), [a])

    def test_concat(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 5))
        check_grads(lambda x, y: _project(T.concat([x, y], axis=1)), [a, b])

    def test_gather_rows_with_repeats(self, rng):
        a = rng.normal(size=(2, 5, 3))
        idx = np.array([[4, 0, 0], [1, 1, 2]])
        check_grads(lambda x: _project(T.gather_rows(x, idx)), [a])
        check_grads(lambda x: _project(T.gather_rows(x, [3, 3, 1])), [a])
        check_grads(lambda x: _project(T.gather_rows(x, [2, 0])), [a[0]])

    def test_reductions(self, rng):
        a = rng.normal(size=(3, 4))
        check_grads(lambda x: _project(T.sum_(x, axis=0)), [a])
        check_grads(lambda x: _project(T.mean(x, axis=1, keepdims=True)), [a])
        check_grads(lambda x: T.mean(x), [a])

    def test_layer_norm(self, rng):
        x, g, b = rng.normal(size=(2, 3, 6)), rng.normal(size=(6,)), rng.normal(size=(6,))
        check_grads(lambda *t: _project(T.layer_norm(*t)), [x, g, b])

    def test_nonlinearities(self, rng):
        a = rng.normal(size=(3, 5)) * 2
        check_grads(lambda x: _project(T.gelu(x)), [a])
        check_grads(lambda x: _project(T.softmax_lastdim(x)), [a])
        check_grads(lambda x: _project(T.sigmoid(x)), [a])

    def test_losses(self, rng):
        xhat, tgt = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
        check_grads(lambda x: T.mse_all_patches(x, tgt), [xhat])
        p = rng.uniform(0.1, 0.9, size=6)
        y = np.array([0, 1, 1, 0, 1, 0])
        check_grads(lambda x: T.binary_cross_entropy(x, y, smoothing=0.1), [p])


class TestGraph:
    def test_shared_input_accumulates(self):
        x = T.Tensor(np.array([2.0, -1.0]), requires_grad=True)
        T.backward(T.sum_(T.mul(x, x) + x))
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_non_scalar_backward_rejected(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(T.ShapeError):
            T.backward(T.scale(x, 2.0))

    def test_shape_errors_name_the_op(self):
        with pytest.raises(T.ShapeError, match="matmul"):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
        with pytest.raises(T.ShapeError, match="add"):
            T.add(T.Tensor(np.ones(3)), T.Tensor(np.ones(4)))

    def test_constants_record_nothing(self):
        out = T.add(T.Tensor(np.ones(2)), T.Tensor(np.ones(2)))
        assert out._node is None and not out.requires_grad

    def test_bce_clamp_and_smoothing_floor(self):
        y = np.array([1.0, 0.0])
        perfect = T.Tensor(np.array([1.0, 0.0]))
        assert np.isfinite(T.binary_cross_entropy(perfect, y).item())
        # smoothed targets keep the loss away from zero at perfect separation
        floor = -(0.9 * np.log(0.9) + 0.1 * np.log(0.1))
        best = T.binary_cross_entropy(T.Tensor(np.array([0.9, 0.1])), y, smoothing=0.1).item()
        assert best == pytest.approx(floor, abs=1e-12)
        assert T.binary_cross_entropy(perfect, y, smoothing=0.1).item() > floor


def _tiny_cfg():
    return ViTConfig(image_size=8, patch_size=4, enc_dim=8, enc_depth=1, enc_heads=2,
                     mlp_ratio=2, dec_dim=8, dec_depth=1, dec_heads=2)


def _model_fd_errors(loss_fn, w, names) -> dict:
    T.zero_grads(w.params.values())
    T.backward(loss_fn())
    errs = {}
    for n in names:
        num = numeric_grad(lambda: loss_fn().item(), w[n].data)
        errs[n] = rel_err(w[n].grad, num)
    return errs


class TestModelGradients:
    def test_reconstruction_loss_all_params(self):
        cfg = _tiny_cfg()
        w = init_weights(cfg, seed=3)
        r = np.random.default_rng(0)
        for t in w.params.values():  # move off the symmetric init so every path matters
            t.data += r.normal(scale=0.1, size=t.shape)
        imgs = r.uniform(size=(2, 8, 8))
        masks = [random_mask(cfg.num_patches, 0.5, r) for _ in range(2)]
        loss = lambda: T.mse_all_patches(reconstruct(patchify(imgs, 4), masks, w), patchify(imgs, 4))
        errs = _model_fd_errors(loss, w, w.names(("patch_embed.", "enc.", "enc_norm.", "dec_embed.",
                                                  "mask_token", "dec.", "dec_norm.", "dec_pred.")))
        assert max(errs.values()) <= 1e-3, errs

    def test_classifier_loss_all_params(self):
        cfg = _tiny_cfg()
        w = init_weights(cfg, seed=4)
        r = np.random.default_rng(1)
        for t in w.params.values():
            t.data += r.normal(scale=0.1, size=t.shape)
        imgs = r.uniform(size=(3, 8, 8))
        y = np.array([1, 0, 1])
        loss = lambda: T.binary_cross_entropy(T.sigmoid(classify(imgs, w)), y, 0.1)
        errs = _model_fd_errors(loss, w, w.names(("patch_embed.", "enc.", "enc_norm.", "head.")))
        assert max(errs.values()) <= 1e-3, errs
