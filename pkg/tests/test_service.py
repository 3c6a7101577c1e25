import json

import numpy as np
import pytest
import requests

from spherezsl.service import (HttpPredictionClient, LocalPredictionClient,
                               PredictionServer, PredictionServiceError, RetryPolicy,
                               ServerClassifier, ServiceHandle, predict_remote)
from spherezsl.store import EmbeddingSet, write_emb1


def make_classifier(c=4, d=8, seed=0, score_mode="cosine"):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((c, d))
    W /= np.linalg.norm(W, axis=1, keepdims=True)
    return ServerClassifier(class_names=[f"k{i}" for i in range(c)], weights=W,
                            score_mode=score_mode)


@pytest.fixture()
def running_server():
    clf = make_classifier()
    recorder = []
    server = PredictionServer(clf, port=0, response_recorder=recorder)
    handle = ServiceHandle(server).start()
    try:
        yield clf, handle, recorder, server
    finally:
        handle.stop()


def test_self_similarity_peaks_at_own_class(running_server):
    clf, handle, _, _ = running_server
    client = HttpPredictionClient(handle.url)
    k = 2
    scores = client.predict(clf.weights[k][None, :])
    assert scores.shape == (1, clf.num_classes)
    assert int(np.argmax(scores[0])) == k
    assert scores[0, k] == pytest.approx(1.0, abs=1e-6)


def test_scores_match_local_computation(running_server):
    clf, handle, _, _ = running_server
    client = HttpPredictionClient(handle.url)
    rng = np.random.default_rng(1)
    X = rng.standard_normal((9, clf.dim))
    remote = client.predict(X)
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    local = Xn @ clf.weights.T
    assert np.max(np.abs(remote - local)) < 1e-6
    assert np.all(remote >= -1.0) and np.all(remote <= 1.0)


def test_dim_mismatch_http_400(running_server):
    _, handle, _, _ = running_server
    resp = requests.post(handle.url + "/v1/predict", json={"features": [[1.0, 2.0]]})
    assert resp.status_code == 400
    assert resp.json()["error"] == "dim_mismatch"


def test_empty_batch_http_400(running_server):
    _, handle, _, _ = running_server
    resp = requests.post(handle.url + "/v1/predict", json={"features": []})
    assert resp.status_code == 400
    assert resp.json()["error"] == "empty_batch"


def test_batch_too_large_http_400(running_server):
    clf, handle, _, _ = running_server
    X = np.zeros((129, clf.dim)) + 0.5
    resp = requests.post(handle.url + "/v1/predict", json={"features": X.tolist()})
    assert resp.status_code == 400
    assert resp.json()["error"] == "batch_too_large"


def test_info_endpoint_exposes_no_names_or_weights(running_server):
    clf, handle, _, _ = running_server
    resp = requests.get(handle.url + "/v1/info")
    assert resp.status_code == 200
    info = resp.json()
    assert info == {"dim": clf.dim, "num_classes": clf.num_classes, "score_mode": "cosine"}


def test_client_chunks_large_batches(running_server):
    clf, handle, _, server = running_server
    client = HttpPredictionClient(handle.url, batch_limit=128)
    rng = np.random.default_rng(2)
    X = rng.standard_normal((257, clf.dim))
    before = server.request_count
    scores = client.predict(X)
    assert scores.shape == (257, clf.num_classes)
    assert server.request_count - before == 3  # 128 + 128 + 1
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    assert np.max(np.abs(scores - Xn @ clf.weights.T)) < 1e-6


def test_client_retries_then_surfaces_transport_failure():
    client = HttpPredictionClient("http://127.0.0.1:9",  # reserved port, nothing listens
                                  retry=RetryPolicy(attempts=3, backoff=0.01, factor=1.5),
                                  timeout=0.2)
    with pytest.raises(PredictionServiceError, match="3 attempts"):
        client.predict(np.ones((1, 4)))


def test_client_rejects_empty_batch(running_server):
    _, handle, _, _ = running_server
    client = HttpPredictionClient(handle.url)
    with pytest.raises(ValueError):
        client.predict(np.zeros((0, 8)))


def test_service_stateless_and_deterministic(running_server):
    clf, handle, _, _ = running_server
    client = HttpPredictionClient(handle.url)
    rng = np.random.default_rng(3)
    X = rng.standard_normal((5, clf.dim))
    first = client.predict(X)
    # interleave other traffic, then repeat
    client.predict(rng.standard_normal((2, clf.dim)))
    second = client.predict(X)
    assert np.array_equal(first, second)


def test_no_weight_values_in_any_response(running_server):
    clf, handle, recorder, _ = running_server
    client = HttpPredictionClient(handle.url)
    client.info()
    rng = np.random.default_rng(4)
    client.predict(rng.standard_normal((7, clf.dim)))
    client.predict(clf.weights)  # even probing with the weights themselves
    requests.get(handle.url + "/v1/nope")
    requests.post(handle.url + "/v1/predict", json={"features": []})

    corpus = b"\n".join(recorder).decode("utf-8", errors="replace")
    # no weight coordinate appears textually (round-trip repr) in any response
    for row in clf.weights:
        for coord in row:
            assert repr(float(coord)) not in corpus
    # no d-length float array in any response reconstructs a weight row
    for body in recorder:
        payload = json.loads(body)
        arrays = payload.get("scores", []) if isinstance(payload, dict) else []
        for arr in arrays:
            if len(arr) == clf.dim:
                v = np.asarray(arr, dtype=np.float64)
                norm = np.linalg.norm(v)
                if norm > 0:
                    cos = clf.weights @ (v / norm)
                    assert np.max(np.abs(cos)) < 0.999


def test_softmax_score_mode():
    clf = make_classifier(score_mode="softmax")
    rng = np.random.default_rng(5)
    X = rng.standard_normal((3, clf.dim))
    scores = clf.predict(X)
    assert np.allclose(scores.sum(axis=1), 1.0)
    assert np.all(scores >= 0)
    # temperature 0.01 softmax over cosine logits
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    z = (Xn @ clf.weights.T) / 0.01
    z -= z.max(axis=1, keepdims=True)
    ref = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    assert np.allclose(scores, ref)


def test_local_client_matches_server_classifier():
    clf = make_classifier()
    client = LocalPredictionClient(clf)
    rng = np.random.default_rng(6)
    X = rng.standard_normal((4, clf.dim))
    assert np.array_equal(predict_remote(client, X), clf.predict(X))
    assert client.info()["dim"] == clf.dim


def test_classifier_from_file_round_trip(tmp_path):
    clf = make_classifier()
    emb = EmbeddingSet(dim=clf.dim, class_names=clf.class_names,
                       labels=np.arange(clf.num_classes, dtype=np.uint32),
                       vectors=clf.weights.astype(np.float32))
    path = tmp_path / "w.emb1"
    write_emb1(emb, path)
    loaded = ServerClassifier.from_file(path)
    assert loaded.class_names == clf.class_names
    assert np.max(np.abs(loaded.weights - clf.weights)) < 1e-6
