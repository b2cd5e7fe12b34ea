import itertools

import numpy as np
import pytest

from fgam.errors import CheckpointError, DegenerateDataset, ShapeMismatch
from fgam.neural import ByteSeqNet, ImageConvNet, Prediction, TrainConfig, checkpoint, layers, train
from fgam.neural.train import learning_rate

FD_STEP = 1e-3


def rel_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return np.abs(analytic - numeric).max() / scale


def central_diff(f, x, h=FD_STEP):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def image_loss(model, target):
    return lambda x: layers.bce_with_logits(model.logits(x[None]), np.array([target]))[0]


def _perturbed(model, rng, scale):
    for k in model.params:
        model.params[k] = model.params[k] + rng.normal(0.0, scale, model.params[k].shape)
    return model


IMAGE_CASES = list(itertools.product(("lse", "gmp", "gap", "flatten"), ("relu", "tanh", "softplus"), ("max", "avg")))


@pytest.mark.parametrize("case", range(24))
def test_image_input_gradient_matches_finite_differences(case):
    head, act, pool = IMAGE_CASES[case]
    rng = np.random.default_rng(100 + case)
    size = int(rng.integers(8, 13))
    channels = tuple(int(c) for c in rng.integers(1, 4, size=2))
    model = ImageConvNet.init(size, channels=channels, activation=act, pool=pool, head=head,
                              beta=float(rng.uniform(1, 6)), seed=case)
    model = _perturbed(model, rng, 0.2)
    x = rng.uniform(0, 255, (size, size))
    target = float(rng.integers(0, 2))
    numeric = central_diff(image_loss(model, target), x.copy())
    assert rel_error(model.input_gradient(x, target), numeric) < 1e-4


@pytest.mark.parametrize("case", range(20))
def test_byteseq_input_gradient_matches_finite_differences(case):
    rng = np.random.default_rng(200 + case)
    window = int(rng.choice([4, 8]))
    model = ByteSeqNet.init(window * int(rng.integers(3, 8)), embed_dim=int(rng.integers(2, 5)),
                            window=window, filters=int(rng.integers(2, 6)), seed=case)
    model = _perturbed(model, rng, 0.1)
    seq = model.encode(rng.integers(0, 256, int(rng.integers(10, model.max_len + 1)), dtype=np.uint8).tobytes())
    # jitter breaks exact ties between identical padding windows under the global max
    e = model.embed(seq) + rng.normal(0.0, 0.05, (model.max_len, model.config["embed_dim"]))
    target = float(rng.integers(0, 2))
    numeric = central_diff(lambda v: model.embedded_loss_and_grad(v, target)[0], e)
    _, analytic = model.embedded_loss_and_grad(e, target)
    assert rel_error(analytic, numeric) < 1e-4
    plain = model.embed(seq)
    assert np.array_equal(model.input_gradient(seq.astype(np.int32), target),
                          model.embedded_loss_and_grad(plain, target)[1])


def _param_check(model, batch, y):
    _, grads, _ = model.loss_and_grads(batch, y)
    for name, p in model.params.items():
        def f(v, name=name):
            saved = model.params[name]
            model.params[name] = v
            out = model.loss_and_grads(batch, y)[0]
            model.params[name] = saved
            return out
        numeric = central_diff(f, p.copy(), h=1e-5)
        if name == "embed":
            numeric[-1] = 0.0  # padding symbol is frozen
        assert rel_error(grads[name], numeric) < 1e-4, name


def test_image_parameter_gradients():
    rng = np.random.default_rng(7)
    model = _perturbed(ImageConvNet.init(8, channels=(2, 3), activation="tanh", pool="avg", seed=1), rng, 0.2)
    _param_check(model, rng.uniform(0, 255, (3, 8, 8)), np.array([0.0, 1.0, 1.0]))


def test_byteseq_parameter_gradients():
    rng = np.random.default_rng(8)
    model = _perturbed(ByteSeqNet.init(32, embed_dim=3, window=8, filters=3, seed=2), rng, 0.1)
    batch = model.prepare([rng.integers(0, 256, n, dtype=np.uint8).tobytes() for n in (32, 20, 7)])
    _param_check(model, batch, np.array([1.0, 0.0, 1.0]))


def test_layer_gradients_conv_and_pools():
    # a tiny step keeps the max-pool check away from near-ties inside a 2x2 block
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 5, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    coef = rng.normal(size=(2, 3, 5, 7))
    out, cache = layers.conv2d_same(x, w, b)
    dx, dw, db = layers.conv2d_same_backward(coef, cache)
    assert rel_error(dx, central_diff(lambda v: (layers.conv2d_same(v, w, b)[0] * coef).sum(), x.copy())) < 1e-6
    assert rel_error(dw, central_diff(lambda v: (layers.conv2d_same(x, v, b)[0] * coef).sum(), w.copy())) < 1e-6
    assert np.allclose(db, coef.sum(axis=(0, 2, 3)))
    for fwd, back in layers.POOLS.values():
        out, pc = fwd(x)
        assert out.shape == (2, 2, 2, 3)
        c = rng.normal(size=out.shape)
        numeric = central_diff(lambda v: (fwd(v)[0] * c).sum(), x.copy(), h=1e-7)
        assert rel_error(back(c, pc), numeric) < 1e-6


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 1, 4, 4))
    w = rng.normal(size=(1, 1, 3, 3))
    out, _ = layers.conv2d_same(x, w, np.zeros(1))
    xp = np.pad(x[0, 0], 1)
    direct = np.array([[(xp[i : i + 3, j : j + 3] * w[0, 0]).sum() for j in range(4)] for i in range(4)])
    assert np.allclose(out[0, 0], direct)


def test_cropped_pixels_get_zero_gradient():
    # odd input; the first conv ignores the row below, so the last row only feeds
    # the conv row that pooling crops away
    model = ImageConvNet.init(9, channels=(2, 2), activation="tanh", pool="avg", head="gap", seed=5)
    model = _perturbed(model, np.random.default_rng(5), 0.3)
    model.params["conv1.w"][:, :, 2, :] = 0.0
    model.params["conv1.w"][:, :, :, 2] = 0.0
    x = np.random.default_rng(6).uniform(0, 255, (9, 9))
    g = model.input_gradient(x)
    assert np.all(g[8, :] == 0.0) and np.all(g[:, 8] == 0.0)
    assert np.count_nonzero(g[:8, :8]) > 0
    numeric = central_diff(image_loss(model, 1.0), x.copy())
    assert np.abs(numeric[8, :]).max() < 1e-12


def test_zero_network_scores_half():
    img_model = ImageConvNet.init(16, zeros=True)
    bs_model = ByteSeqNet.init(64, window=8, zeros=True)
    x = np.random.default_rng(0).uniform(0, 255, (16, 16))
    assert img_model.forward(x).score == 0.5
    assert img_model.forward(x).label == "malware"
    assert bs_model.forward(b"\x01\x02\x03").score == 0.5
    assert np.all(img_model.input_gradient(x) == 0.0)


def test_prediction_threshold():
    assert Prediction(0.5).label == "malware"
    assert Prediction(0.4999999).label == "benign"
    assert Prediction(0.9).is_malware and not Prediction(0.1).is_malware


def test_scores_bounded_for_extreme_inputs():
    model = _perturbed(ImageConvNet.init(8, seed=0), np.random.default_rng(0), 50.0)
    s = model.scores([np.zeros((8, 8)), np.full((8, 8), 255.0)])
    assert np.all((s >= 0) & (s <= 1)) and np.all(np.isfinite(s))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ImageConvNet.init(16).scores([np.zeros((15, 16))])
    with pytest.raises(ShapeMismatch):
        ImageConvNet.init(4, channels=(2, 2, 2))
    with pytest.raises(ShapeMismatch):
        ByteSeqNet.init(64, window=8).scores([np.zeros(63, dtype=np.int32)])
    with pytest.raises(ShapeMismatch):
        ByteSeqNet.init(60, window=8)


def test_byteseq_truncates_and_pads():
    model = ByteSeqNet.init(16, window=8)
    assert list(model.encode(b"\x05" * 3)) == [5, 5, 5] + [256] * 13
    assert len(model.encode(bytes(40))) == 16


def _toy_data(rng, n=40, size=8):
    y = np.repeat([0.0, 1.0], n // 2)
    x = rng.uniform(0, 80, (n, size, size))
    x[y == 1] += 150
    return x, y


def test_training_learns_and_is_deterministic():
    rng = np.random.default_rng(0)
    x, y = _toy_data(rng)
    xt, yt = _toy_data(rng, 20)
    cfg = TrainConfig(epochs=10, batch_size=8, seed=3)
    a = train(ImageConvNet.init(8, channels=(2, 2), seed=1), x, y, xt, yt, cfg)
    b = train(ImageConvNet.init(8, channels=(2, 2), seed=1), x, y, xt, yt, cfg)
    assert a.metadata["final_accuracy"] >= 0.9
    assert a.metadata["epochs"] == 10 and len(a.metadata["history"]) == 10
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_training_rejects_single_class():
    x = np.zeros((4, 8, 8))
    with pytest.raises(DegenerateDataset):
        train(ImageConvNet.init(8), x, np.ones(4), x, np.ones(4), TrainConfig(epochs=1))


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=0.01)
    assert [learning_rate(cfg, e) for e in (0, 4, 5, 9, 10)] == [0.01, 0.01, 0.005, 0.005, 0.0025]


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    for model in (ImageConvNet.init(16, seed=2), ByteSeqNet.init(64, window=8, seed=3)):
        model = _perturbed(model, rng, 0.1)
        for k in model.params:
            model.params[k] = model.params[k].astype(np.float32).astype(np.float64)
        model.metadata = {"epochs": 3, "final_accuracy": 0.5, "seed": 9}
        path = tmp_path / f"{model.arch}.ckpt"
        checkpoint.save(model, path)
        blob = path.read_bytes()
        assert blob[:8] == b"FGAMCKPT"
        loaded = checkpoint.load(path)
        assert type(loaded) is type(model)
        assert loaded.config == model.config and loaded.metadata == model.metadata
        for k in model.params:
            assert np.array_equal(loaded.params[k], model.params[k])
        assert checkpoint.dumps(loaded) == blob


@pytest.mark.parametrize("mangle", [
    lambda b: b"NOTACKPT" + b[8:],
    lambda b: b[:8] + b"\x09\x00" + b[10:],
    lambda b: b[:-4],
    lambda b: b + b"\x00",
    lambda b: b[:12],
], ids=["magic", "version", "truncated", "trailing", "header-cut"])
def test_checkpoint_corruption(mangle):
    blob = checkpoint.dumps(ImageConvNet.init(8, channels=(1,), seed=0))
    with pytest.raises(CheckpointError):
        checkpoint.loads(mangle(blob))
