"""The protected base classifier behind a prediction-only HTTP/JSON API.

The server realizes the black-box threat model: clients may request scores
for feature batches but the classifier weights never leave the process (no
endpoint, response, or log carries them). In white-box mode the weights file
is read directly and this module is bypassed.

Endpoints:
    POST /v1/predict  {"features": [[f32 x d] x batch]} -> {"scores": [[f32 x C] x batch]}
    GET  /v1/info     {"dim": d, "num_classes": C, "score_mode": "cosine"|"softmax"}

Errors: HTTP 400 with {"error": "dim_mismatch"|"empty_batch"|"batch_too_large"},
HTTP 500 with {"error": "internal"}.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests

from .store import EmbeddingSet, read_emb1
from .validation import check_feature_matrix, unit_rows

DEFAULT_BATCH_LIMIT = 128
SOFTMAX_TEMPERATURE = 0.01


class PredictionServiceError(RuntimeError):
    """Client-side failure talking to the prediction service."""

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        self.code = code


@dataclass
class ServerClassifier:
    """Cosine classifier over unit weight rows; immutable after construction."""

    class_names: list[str]
    weights: np.ndarray  # (C, d) float64, unit rows
    score_mode: str = "cosine"

    def __post_init__(self):
        self.weights = unit_rows(np.asarray(self.weights, dtype=np.float64))
        if self.score_mode not in ("cosine", "softmax"):
            raise ValueError(f"unknown score mode {self.score_mode!r}")

    @classmethod
    def from_embedding_set(cls, emb_set: EmbeddingSet, score_mode: str = "cosine") -> "ServerClassifier":
        if len(emb_set) != emb_set.num_classes:
            raise ValueError("weights set must hold exactly one row per class")
        order = np.argsort(emb_set.labels)
        if not np.array_equal(np.sort(emb_set.labels), np.arange(emb_set.num_classes)):
            raise ValueError("weights set must cover every class exactly once")
        return cls(class_names=list(emb_set.class_names),
                   weights=emb_set.vectors[order].astype(np.float64),
                   score_mode=score_mode)

    @classmethod
    def from_file(cls, path, score_mode: str = "cosine") -> "ServerClassifier":
        return cls.from_embedding_set(read_emb1(path), score_mode=score_mode)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Per-sample, per-class scores: cosine logits (or their softmax)."""
        X = check_feature_matrix(features, dim=self.dim, name="features")
        scores = np.clip(unit_rows(X) @ self.weights.T, -1.0, 1.0)
        if self.score_mode == "softmax":
            scaled = scores / SOFTMAX_TEMPERATURE
            scaled -= scaled.max(axis=1, keepdims=True)
            e = np.exp(scaled)
            scores = e / e.sum(axis=1, keepdims=True)
        return scores

    def info(self) -> dict:
        return {"dim": self.dim, "num_classes": self.num_classes, "score_mode": self.score_mode}


class _PredictionHandler(BaseHTTPRequestHandler):
    server_version = "spherezsl-oracle/1.0"

    def log_message(self, fmt, *args):  # weight-free, near-silent logging
        pass

    def _send(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        if self.server.response_recorder is not None:
            self.server.response_recorder.append(body)
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path != "/v1/info":
            self._send(404, {"error": "not_found"})
            return
        self._send(200, self.server.classifier.info())

    def do_POST(self):
        if self.path != "/v1/predict":
            self._send(404, {"error": "not_found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length))
            features = payload.get("features")
            if not isinstance(features, list) or len(features) == 0:
                self._send(400, {"error": "empty_batch"})
                return
            if len(features) > self.server.batch_limit:
                self._send(400, {"error": "batch_too_large"})
                return
            X = np.asarray(features, dtype=np.float64)
            if X.ndim != 2 or X.shape[1] != self.server.classifier.dim:
                self._send(400, {"error": "dim_mismatch"})
                return
            scores = self.server.classifier.predict(X)
            self.server.request_count += 1
            self._send(200, {"scores": scores.tolist()})
        except (ValueError, json.JSONDecodeError):
            self._send(400, {"error": "dim_mismatch"})
        except Exception:
            self._send(500, {"error": "internal"})


class PredictionServer(ThreadingHTTPServer):
    """HTTP server bound to a classifier; stateless across requests."""

    daemon_threads = True

    def __init__(self, classifier: ServerClassifier, host: str = "127.0.0.1",
                 port: int = 0, batch_limit: int = DEFAULT_BATCH_LIMIT,
                 response_recorder: list | None = None):
        super().__init__((host, port), _PredictionHandler)
        self.classifier = classifier
        self.batch_limit = batch_limit
        self.response_recorder = response_recorder
        self.request_count = 0

    @property
    def url(self) -> str:
        return f"http://{self.server_address[0]}:{self.server_address[1]}"


class ServiceHandle:
    """A server running on a background thread, stoppable for tests and the CLI."""

    def __init__(self, server: PredictionServer):
        self.server = server
        self._thread = threading.Thread(target=server.serve_forever, daemon=True)

    def start(self) -> "ServiceHandle":
        self._thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self._thread.join(timeout=5)

    @property
    def url(self) -> str:
        return self.server.url

    def __enter__(self) -> "ServiceHandle":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(weights_file, port: int, host: str = "127.0.0.1", score_mode: str = "cosine",
          batch_limit: int = DEFAULT_BATCH_LIMIT, block: bool = True):
    """Start serving the classifier stored at ``weights_file``.

    With ``block=True`` runs until interrupted; otherwise returns a started
    :class:`ServiceHandle`.
    """
    classifier = ServerClassifier.from_file(weights_file, score_mode=score_mode)
    server = PredictionServer(classifier, host=host, port=port, batch_limit=batch_limit)
    if not block:
        return ServiceHandle(server).start()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


@dataclass
class RetryPolicy:
    attempts: int = 3
    backoff: float = 0.1
    factor: float = 2.0


class HttpPredictionClient:
    """Client for the prediction API: chunks large batches, retries transport errors."""

    def __init__(self, base_url: str, batch_limit: int = DEFAULT_BATCH_LIMIT,
                 retry: RetryPolicy | None = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.batch_limit = batch_limit
        self.retry = retry or RetryPolicy()
        self.timeout = timeout
        self._session = requests.Session()
        self._info = None

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        last_error = None
        delay = self.retry.backoff
        for attempt in range(self.retry.attempts):
            try:
                resp = self._session.request(method, self.base_url + path, json=payload,
                                             timeout=self.timeout)
                if resp.status_code >= 500:
                    last_error = PredictionServiceError(
                        f"server error {resp.status_code}", code="internal")
                elif resp.status_code >= 400:
                    code = None
                    try:
                        code = resp.json().get("error")
                    except ValueError:
                        pass
                    raise PredictionServiceError(
                        f"request rejected ({resp.status_code}): {code}", code=code)
                else:
                    return resp.json()
            except PredictionServiceError:
                raise
            except requests.RequestException as exc:
                last_error = PredictionServiceError(f"transport failure: {exc}")
            if attempt + 1 < self.retry.attempts:
                time.sleep(delay)
                delay *= self.retry.factor
        raise PredictionServiceError(
            f"service unreachable after {self.retry.attempts} attempts: {last_error}")

    def info(self) -> dict:
        if self._info is None:
            self._info = self._request("GET", "/v1/info")
        return self._info

    def predict(self, features: np.ndarray) -> np.ndarray:
        X = check_feature_matrix(features, name="features")
        if X.shape[0] == 0:
            raise ValueError("batch must be non-empty")
        chunks = []
        for lo in range(0, X.shape[0], self.batch_limit):
            part = X[lo:lo + self.batch_limit]
            out = self._request("POST", "/v1/predict", {"features": part.tolist()})
            chunks.append(np.asarray(out["scores"], dtype=np.float64))
        return np.concatenate(chunks, axis=0)


class LocalPredictionClient:
    """In-process client with the same surface, for tests and white-box tooling."""

    def __init__(self, classifier: ServerClassifier):
        self._classifier = classifier
        self.request_count = 0

    def info(self) -> dict:
        return self._classifier.info()

    def predict(self, features: np.ndarray) -> np.ndarray:
        X = check_feature_matrix(features, dim=self._classifier.dim, name="features")
        if X.shape[0] == 0:
            raise ValueError("batch must be non-empty")
        self.request_count += 1
        return self._classifier.predict(X)


def predict_remote(client, features: np.ndarray) -> np.ndarray:
    """Score a feature batch through any prediction client, in request order."""
    return client.predict(features)
