import numpy as np
import pytest

from oracles import mean_resultant_length
from spherezsl.recovery import RecoveryConfig, recover_blackbox, recover_whitebox
from spherezsl.service import LocalPredictionClient, ServerClassifier
from spherezsl.vmf import ClassPrototypes, derive_kappa


def rotate_away(mu, angle, rng):
    v = rng.standard_normal(mu.size)
    v -= (v @ mu) * mu
    v /= np.linalg.norm(v)
    return np.cos(angle) * mu + np.sin(angle) * v


def random_weights(c, d, seed=0):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((c, d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    return W


def test_whitebox_antipodal_mean_cosine():
    W = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    protos = ClassPrototypes(class_names=["a", "b"], directions=W)
    cfg = RecoveryConfig(samples_per_class=4000, seed=3)
    virtual, params = recover_whitebox(protos, cfg)
    assert params.kappa_text == pytest.approx(36.0 / np.pi ** 2, abs=1e-9)
    # Monte-Carlo check of the mean resultant length for kappa ~ 3.65, d=3
    expected = mean_resultant_length(3, params.kappa_effective)
    for c in range(2):
        x = virtual.vectors[virtual.labels == c].astype(np.float64)
        got = float((x @ W[c]).mean())
        assert got > 0.5
        assert abs(got - expected) < 0.03


def test_whitebox_zero_samples():
    protos = ClassPrototypes(class_names=["a", "b"], directions=np.eye(2))
    virtual, params = recover_whitebox(protos, RecoveryConfig(samples_per_class=0))
    assert len(virtual) == 0
    assert params.kappa_text > 0


def test_whitebox_deterministic():
    W = random_weights(3, 8, seed=1)
    protos = ClassPrototypes(class_names=["a", "b", "c"], directions=W)
    cfg = RecoveryConfig(samples_per_class=50, seed=11)
    v1, _ = recover_whitebox(protos, cfg)
    v2, _ = recover_whitebox(protos, cfg)
    assert v1.vectors.tobytes() == v2.vectors.tobytes()


def test_whitebox_normalizes_unnormalized_weights():
    protos = ClassPrototypes(class_names=["a", "b"],
                             directions=np.array([[3.0, 0.0], [0.0, 0.5]]))
    _, params = recover_whitebox(protos, RecoveryConfig(samples_per_class=1))
    assert params.kappa_text == pytest.approx(144.0 / np.pi ** 2, abs=1e-9)


def blackbox_fixture(seed=0, c=10, d=32):
    rng = np.random.default_rng(seed)
    W = random_weights(c, d, seed=seed)
    angles = np.deg2rad(rng.uniform(25, 40, size=c))
    T = np.stack([rotate_away(W[i], angles[i], rng) for i in range(c)])
    server = ServerClassifier(class_names=[f"c{i}" for i in range(c)], weights=W)
    client = LocalPredictionClient(server)
    protos = ClassPrototypes(class_names=server.class_names, directions=T)
    return W, protos, client


def test_blackbox_zero_residual_at_true_weights():
    W, _, client = blackbox_fixture()
    protos = ClassPrototypes(class_names=[f"c{i}" for i in range(10)], directions=W)
    cfg = RecoveryConfig(samples_per_class=0, epochs=1, mode="black-box", seed=2)
    result = recover_blackbox(protos, client, cfg)
    assert result.loss_history[0] < 1e-10


def test_blackbox_converges_to_server_weights():
    W, protos, client = blackbox_fixture(seed=4)
    cfg = RecoveryConfig(samples_per_class=20, epochs=200, learning_rate=3e-3,
                         batch_size=64, seed=5, mode="black-box")
    result = recover_blackbox(protos, client, cfg)
    cos = np.sum(result.prototypes.directions * W, axis=1)
    assert np.min(cos) >= 0.95
    assert result.loss_history[-1] <= result.loss_history[0] / 10.0
    assert result.converged
    assert result.metadata["kappa_text"] == pytest.approx(
        derive_kappa(ClassPrototypes(protos.class_names, protos.directions)))
    # returned virtual set is sampled from the tuned prototypes
    assert len(result.virtual) == 200
    norms = np.linalg.norm(result.virtual.vectors.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-6)


def test_blackbox_deterministic():
    _, protos, client = blackbox_fixture(seed=6)
    cfg = RecoveryConfig(samples_per_class=10, epochs=30, learning_rate=1e-3,
                         batch_size=32, seed=7, mode="black-box")
    a = recover_blackbox(protos, client, cfg)
    b = recover_blackbox(protos, client, cfg)
    assert a.virtual.vectors.tobytes() == b.virtual.vectors.tobytes()
    assert a.loss_history == b.loss_history


def test_blackbox_constant_score_server_reports_nonconvergence():
    class ConstantClient:
        def info(self):
            return {"dim": 16, "num_classes": 4, "score_mode": "cosine"}

        def predict(self, X):
            return np.full((X.shape[0], 4), 0.25)

    protos = ClassPrototypes(class_names=list("abcd"),
                             directions=random_weights(4, 16, seed=8))
    cfg = RecoveryConfig(samples_per_class=5, epochs=25, learning_rate=1e-3,
                         batch_size=16, seed=9, mode="black-box")
    result = recover_blackbox(protos, ConstantClient(), cfg)
    assert not result.converged
    assert result.metadata["final_loss"] > 1e-3


def test_blackbox_dimension_mismatch_rejected():
    _, protos, client = blackbox_fixture()
    bad = ClassPrototypes(class_names=protos.class_names,
                          directions=random_weights(10, 16, seed=1))
    with pytest.raises(ValueError, match="dimensionality"):
        recover_blackbox(bad, client, RecoveryConfig(mode="black-box"))


def test_blackbox_frozen_pool_mode():
    _, protos, client = blackbox_fixture(seed=10)
    cfg = RecoveryConfig(samples_per_class=5, epochs=40, learning_rate=1e-3,
                         batch_size=32, seed=11, mode="black-box",
                         resample_each_epoch=False)
    before = client.request_count
    result = recover_blackbox(protos, client, cfg)
    # one server round per epoch when resampling, exactly one when frozen
    assert client.request_count - before == 1
    assert result.loss_history[-1] < result.loss_history[0]


def test_config_validation():
    with pytest.raises(ValueError):
        RecoveryConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        RecoveryConfig(learning_rate=-1.0).validate()
    with pytest.raises(ValueError):
        RecoveryConfig(mode="grey-box").validate()
