"""Gradient-check oracles and contracts for the convnet stack.

Finite differences are central, 64-bit, step 1e-5; analytic gradients must
agree to relative error < 1e-4 on randomized small tensors.
"""

import numpy as np
import pytest

from advstim.nn import (
    ArchSpec, AvgPool2D, Conv2D, Dense, Flatten, MaxPool2D, Model, ReLU,
    TrainConfig, accuracy, cross_entropy, input_gradient, load_checkpoint,
    save_checkpoint, softmax, train_model,
)
from advstim.nn.data import FINE_NAMES, fine_index, synth_dataset

FD_STEP = 1e-5
FD_TOL = 1e-4


def _fd_grad(f, x, step=FD_STEP):
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def _rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def _check_layer_input_grad(layer, x, rng):
    y, cache = layer.forward(x)
    r = rng.normal(size=y.shape)
    dx, _ = layer.backward(r, cache)
    fd = _fd_grad(lambda: float((layer.forward(x)[0] * r).sum()), x)
    assert _rel_err(dx, fd) < FD_TOL


def test_conv_gradients():
    rng = np.random.default_rng(0)
    layer = Conv2D(2, 3, kernel=3, stride=2)
    layer.init_params(rng)
    x = rng.normal(size=(2, 7, 7, 2))
    y, cache = layer.forward(x)
    r = rng.normal(size=y.shape)
    dx, dparams = layer.backward(r, cache)

    fd_x = _fd_grad(lambda: float((layer.forward(x)[0] * r).sum()), x)
    assert _rel_err(dx, fd_x) < FD_TOL
    fd_w = _fd_grad(lambda: float((layer.forward(x)[0] * r).sum()), layer.w)
    assert _rel_err(dparams["w"], fd_w) < FD_TOL
    fd_b = _fd_grad(lambda: float((layer.forward(x)[0] * r).sum()), layer.b)
    assert _rel_err(dparams["b"], fd_b) < FD_TOL


def test_dense_gradients():
    rng = np.random.default_rng(1)
    layer = Dense(10, 4)
    layer.init_params(rng)
    x = rng.normal(size=(3, 10))
    y, cache = layer.forward(x)
    r = rng.normal(size=y.shape)
    dx, dparams = layer.backward(r, cache)
    assert _rel_err(dx, _fd_grad(lambda: float((layer.forward(x)[0] * r).sum()), x)) < FD_TOL
    assert _rel_err(dparams["w"], _fd_grad(lambda: float((layer.forward(x)[0] * r).sum()), layer.w)) < FD_TOL


def test_relu_gradient_and_kink_convention():
    rng = np.random.default_rng(2)
    # keep inputs away from the kink so finite differences are valid
    x = rng.uniform(0.05, 1.0, size=(2, 5, 5, 2)) * np.where(rng.uniform(size=(2, 5, 5, 2)) < 0.5, -1.0, 1.0)
    _check_layer_input_grad(ReLU(), x, rng)
    # subgradient at exactly 0 is 0
    y, cache = ReLU().forward(np.zeros((1, 2, 2, 1)))
    dx, _ = ReLU().backward(np.ones_like(y), cache)
    assert np.all(dx == 0.0)


def test_maxpool_gradient():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(2, 6, 6, 2))
    _check_layer_input_grad(MaxPool2D(2), x, rng)


def test_maxpool_tie_goes_to_first():
    x = np.full((1, 2, 2, 1), 3.0)
    layer = MaxPool2D(2)
    y, cache = layer.forward(x)
    dx, _ = layer.backward(np.ones_like(y), cache)
    assert y[0, 0, 0, 0] == 3.0
    assert dx[0, 0, 0, 0] == 1.0 and dx.sum() == 1.0


def test_avgpool_gradient():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6, 6, 3))
    _check_layer_input_grad(AvgPool2D(2), x, rng)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 6))
    labels = rng.integers(0, 6, size=4)
    _, dlogits = cross_entropy(logits, labels)
    fd = _fd_grad(lambda: cross_entropy(logits, labels)[0], logits)
    assert _rel_err(dlogits, fd) < FD_TOL


def test_softmax_shift_invariance():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(8, 10)) * 5.0
    shifted = logits + rng.normal(size=(8, 1)) * 50.0
    assert np.abs(softmax(logits) - softmax(shifted)).max() < 1e-12
    assert np.abs(softmax(logits).sum(axis=1) - 1.0).max() < 1e-12


def _tiny_arch(h=12, w=12, n_fine=4, retina=False):
    return ArchSpec(
        input_hw=(h, w),
        in_channels=1,
        n_fine=n_fine,
        layers=(
            ("conv", {"out": 4, "kernel": 3, "stride": 1}),
            ("relu", {}),
            ("maxpool", {"size": 2}),
            ("conv", {"out": 6, "kernel": 3, "stride": 1}),
            ("relu", {}),
            ("flatten", {}),
            ("dense", {"out": n_fine}),
        ),
        retina=retina,
    )


def test_model_input_gradient_vs_fd():
    rng = np.random.default_rng(7)
    model = Model.build(_tiny_arch(), seed=11)
    x = rng.uniform(40.0, 215.0, size=(12, 12, 1))
    r = rng.normal(size=4)
    g = input_gradient(model, x, r)
    # spot-check 20 random pixels against central differences
    coords = [(int(a), int(b)) for a, b in rng.integers(0, 12, size=(20, 2))]
    for (i, j) in coords:
        orig = x[i, j, 0]
        x[i, j, 0] = orig + FD_STEP
        hi = float(model.forward(x) @ r)
        x[i, j, 0] = orig - FD_STEP
        lo = float(model.forward(x) @ r)
        x[i, j, 0] = orig
        fd = (hi - lo) / (2 * FD_STEP)
        denom = max(abs(fd), np.abs(g).max(), 1e-8)
        assert abs(g[i, j, 0] - fd) / denom < FD_TOL


def test_linear_model_gradient_is_weight_row():
    # flatten + dense only: the map from image to logits is linear, and the
    # gradient of logit_j is exactly its j-th row (weights over input scale)
    from advstim.nn.model import INPUT_SCALE

    arch = ArchSpec((4, 4), 1, 3, (("flatten", {}), ("dense", {"out": 3})))
    model = Model.build(arch, seed=3)
    x = np.random.default_rng(8).uniform(size=(4, 4, 1))
    for j in range(3):
        r = np.zeros(3)
        r[j] = 1.0
        g = input_gradient(model, x, r)
        row = model.layers[1].w[:, j].reshape(4, 4, 1) / INPUT_SCALE
        assert np.abs(g - row).max() < 1e-12


def test_forward_deterministic_and_finite():
    model = Model.build(_tiny_arch(), seed=1)
    x = np.random.default_rng(9).uniform(0, 255, size=(3, 12, 12, 1))
    a = model.forward(x)
    b = model.forward(x)
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


def test_forward_rejects_wrong_dims():
    model = Model.build(_tiny_arch(), seed=1)
    with pytest.raises(ValueError):
        model.forward(np.zeros((10, 10, 1)))


def test_one_pixel_perturbation_bounded_by_operator_norms():
    # |dlogits|_inf <= eps * prod of per-layer inf-operator-norm bounds
    model = Model.build(_tiny_arch(), seed=21)
    rng = np.random.default_rng(22)
    x = rng.uniform(40, 215, size=(12, 12, 1))
    eps = 4.0
    x2 = x.copy()
    x2[5, 7, 0] += eps
    delta = np.abs(model.forward(x2) - model.forward(x)).max()
    from advstim.nn.model import INPUT_SCALE

    bound = eps / INPUT_SCALE
    for layer in model.layers:
        if isinstance(layer, Conv2D):
            bound *= max(
                float(np.abs(layer.w[:, :, :, oc]).sum()) for oc in range(layer.out_channels)
            )
        elif isinstance(layer, Dense):
            bound *= float(np.abs(layer.w).sum(axis=0).max())
        # relu / pools / flatten are inf-norm contractions
    assert delta <= bound + 1e-9


def test_arch_validation_errors():
    with pytest.raises(ValueError, match="dense before flatten"):
        Model.build(ArchSpec((8, 8), 1, 2, (("dense", {"out": 2}),)))
    with pytest.raises(ValueError, match="does not divide"):
        Model.build(ArchSpec((9, 9), 1, 2, (("maxpool", {"size": 2}), ("flatten", {}), ("dense", {"out": 2}))))
    with pytest.raises(ValueError, match="fine-class count"):
        Model.build(ArchSpec((8, 8), 1, 5, (("flatten", {}), ("dense", {"out": 3}))))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = Model.build(_tiny_arch(), seed=13)
    model.quantize_weights_f32()
    model.meta = {"note": "roundtrip probe"}
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    rng = np.random.default_rng(14)
    for _ in range(10):
        x = rng.uniform(0, 255, size=(12, 12, 1))
        a = model.forward(x)
        b = loaded.forward(x)
        assert np.array_equal(a, b)
    assert loaded.meta == {"note": "roundtrip probe"}
    assert loaded.arch == model.arch


def test_checkpoint_truncation_and_magic_errors(tmp_path):
    model = Model.build(_tiny_arch(), seed=13)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = path.read_bytes()

    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(blob[:-40])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(trunc)

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)

    vers = tmp_path / "vers.ckpt"
    vers.write_bytes(blob[:8] + (99).to_bytes(4, "little") + blob[12:])
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(vers)


@pytest.fixture(scope="module")
def two_class_set():
    # disks vs squares only, relabeled to 2 classes at the model's input size
    ds = synth_dataset(40, size=20, seed=42, shapes=("disk", "square"))
    keep = [i for i, lab in enumerate(ds.labels) if FINE_NAMES[lab].endswith("plain")]
    x = ds.images[keep]
    y = np.asarray([0 if FINE_NAMES[ds.labels[i]].startswith("disk") else 1 for i in keep])
    return x, y


def test_training_learns_and_is_deterministic(two_class_set):
    x, y = two_class_set
    arch = ArchSpec(
        (20, 20), 1, 2,
        (
            ("conv", {"out": 4, "kernel": 3, "stride": 1}),
            ("relu", {}),
            ("maxpool", {"size": 2}),
            ("flatten", {}),
            ("dense", {"out": 2}),
        ),
    )
    cfg = TrainConfig(epochs=20, batch_size=16, lr=0.06, seed=5)
    m1 = train_model(arch, x, y, cfg)
    assert accuracy(m1, x, y) > 0.9
    assert m1.meta["epoch_losses"][-1] < m1.meta["epoch_losses"][0]

    m2 = train_model(arch, x, y, cfg)
    for key, arr in m1.named_params().items():
        assert np.array_equal(arr, m2.named_params()[key]), key


def test_zero_epochs_equals_initialization(two_class_set):
    x, y = two_class_set
    arch = _tiny_arch(20, 20, 2)
    arch = ArchSpec(arch.input_hw, 1, 2, arch.layers[:-1] + (("dense", {"out": 2}),))
    m = train_model(arch, x, y, TrainConfig(epochs=0, seed=77))
    ref = Model.build(arch, seed=77)
    ref.quantize_weights_f32()
    for key, arr in m.named_params().items():
        assert np.array_equal(arr, ref.named_params()[key]), key


def test_training_with_augmentations_runs(two_class_set):
    x, y = two_class_set
    arch = ArchSpec(
        (20, 20), 1, 2,
        (("conv", {"out": 3, "kernel": 3, "stride": 2}), ("relu", {}), ("flatten", {}), ("dense", {"out": 2})),
    )
    cfg = TrainConfig(epochs=2, batch_size=16, lr=0.001, seed=6,
                      rescale_augment=True, adversarial_augment=True, adv_eps=4.0)
    m = train_model(arch, x, y, cfg)
    assert m.meta["rescale_augment"] and m.meta["adversarial_augment"]
    assert np.all(np.isfinite(m.forward(x[:4])))


def test_synth_dataset_structure():
    ds = synth_dataset(3, size=32, seed=0)
    assert ds.images.shape == (3 * 16, 32, 32, 1)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 255.0
    counts = np.bincount(ds.labels, minlength=16)
    assert np.all(counts == 3)
    again = synth_dataset(3, size=32, seed=0)
    assert np.array_equal(ds.images, again.images)
    other = synth_dataset(3, size=32, seed=1)
    assert not np.array_equal(ds.images, other.images)


def test_dataset_manifest_roundtrip(tmp_path):
    from advstim.nn.data import load_dataset, write_dataset

    ds = synth_dataset(2, size=16, seed=3)
    manifest = write_dataset(ds, tmp_path)
    back = load_dataset(manifest)
    assert back.images.shape == ds.images.shape
    assert np.array_equal(back.labels, ds.labels)
    # PNG round-trip quantizes to whole intensities
    assert np.abs(back.images - np.rint(ds.images)).max() <= 0.5
