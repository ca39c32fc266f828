"""Client for a live inference service.

Wire protocol (JSON over POST, bearer token optional)::

    /v1/score    {"image", "prompt", "kind"}  -> {"confidence"}
    /v1/propose  {"image", "concepts"}        -> {"boxes": [...], "features"?}
    /v1/answer   {"image", "query"}           -> {"text"}

``image`` is a base64 PNG of the queried crop and ``features`` an optional
base64 FGRD payload.  The service decides how it turns a Yes/No prompt into
a confidence.  Reading the probability of the "Yes" token from logprobs is
the faithful choice.  A majority vote over sampled answers also works but is
coarser; either way this client only checks that the value lies in [0, 1].
"""

from __future__ import annotations

import base64
import io
import math
import os
import threading
import time
from typing import Any, Sequence

import requests

from ..core import FeatureGrid, Rect, TargetSet
from ..errors import FormatError, OracleUnavailable, ProtocolError
from .base import (
    PARSE_TEMPLATE,
    ExpertProposal,
    OracleSuite,
    ProposalBox,
    check_confidence,
    existence_prompt,
    sufficiency_prompt,
)

ENDPOINT_ENV = "CVSEARCH_ENDPOINT"
TOKEN_ENV = "CVSEARCH_TOKEN"


class HttpClient:
    """POST JSON with bounded concurrency and retry on 5xx / connection errors."""

    def __init__(
        self,
        endpoint: str,
        token: str | None = None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
    ):
        if not endpoint:
            raise ValueError("endpoint is empty")
        self.endpoint = endpoint.rstrip("/")
        self.token = token
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.retry_count = 0
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._local = threading.local()

    def _session(self) -> requests.Session:
        s = getattr(self._local, "session", None)
        if s is None:
            s = self._local.session = requests.Session()
        return s

    def post(self, path: str, body: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        url = self.endpoint + path
        attempt = 0
        while True:
            try:
                with self._slots:
                    resp = self._session().post(url, json=body, headers=headers, timeout=self.timeout)
            except requests.Timeout as exc:
                raise OracleUnavailable(f"{url}: timed out after {self.timeout}s") from exc
            except requests.ConnectionError as exc:
                err: Exception = OracleUnavailable(f"{url}: {exc}")
            else:
                if resp.status_code < 500:
                    break
                err = OracleUnavailable(f"{url}: HTTP {resp.status_code}")
            if attempt >= self.retries:
                raise err
            with self._lock:
                self.retry_count += 1
            time.sleep(self.backoff * 2**attempt)
            attempt += 1
        if resp.status_code != 200:
            raise ProtocolError(f"{url}: HTTP {resp.status_code}")
        try:
            doc = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"{url}: response is not JSON") from exc
        if not isinstance(doc, dict):
            raise ProtocolError(f"{url}: response is not a JSON object")
        return doc


def http_score(endpoint: str | HttpClient, request: dict) -> float:
    """POST a scoring request to ``/v1/score`` and return the confidence."""
    client = endpoint if isinstance(endpoint, HttpClient) else HttpClient(endpoint)
    doc = client.post("/v1/score", request)
    if "confidence" not in doc:
        raise ProtocolError("score response lacks 'confidence'")
    value = doc["confidence"]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProtocolError(f"confidence {value!r} is not a number")
    return check_confidence(value)


def encode_png(image) -> str:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def crop_image(image, region: Rect):
    """Pixel crop covering ``region``; at least one pixel per side."""
    w, h = image.size
    x0 = min(int(math.floor(region.x0 * w)), w - 1)
    y0 = min(int(math.floor(region.y0 * h)), h - 1)
    x1 = max(int(math.ceil(region.x1 * w)), x0 + 1)
    y1 = max(int(math.ceil(region.y1 * h)), y0 + 1)
    return image.crop((x0, y0, x1, y1))


def _parse_box(b: Any) -> ProposalBox:
    try:
        rect = Rect(b["x0"], b["y0"], b["x1"], b["y1"])
        return ProposalBox(rect, str(b["label"]), float(b.get("score", 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed box {b!r}") from exc


class HttpOracleSuite(OracleSuite):
    """Oracle suite backed by one image and a remote service."""

    def __init__(self, image, endpoint: str | None = None, token: str | None = None, **client_kw):
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV, "")
        if not endpoint:
            raise OracleUnavailable(f"no endpoint given and ${ENDPOINT_ENV} is unset")
        self.image = image.convert("RGB")
        self.client = HttpClient(endpoint, token or os.environ.get(TOKEN_ENV), **client_kw)

    @classmethod
    def from_path(cls, path, endpoint=None, token=None, **client_kw) -> "HttpOracleSuite":
        from PIL import Image

        with Image.open(path) as im:
            im.load()
            return cls(im, endpoint, token, **client_kw)

    def _crop(self, region: Rect) -> str:
        return encode_png(crop_image(self.image, region))

    def sufficiency(self, region, query):
        req = {"image": self._crop(region), "prompt": sufficiency_prompt(query), "kind": "sufficiency"}
        return http_score(self.client, req)

    def existence(self, region, phrase):
        req = {"image": self._crop(region), "prompt": existence_prompt(phrase), "kind": "existence"}
        return http_score(self.client, req)

    def expert(self, region, concepts: Sequence[str]) -> ExpertProposal:
        doc = self.client.post("/v1/propose", {"image": self._crop(region), "concepts": list(concepts)})
        boxes = doc.get("boxes")
        if not isinstance(boxes, list):
            raise ProtocolError("propose response lacks a 'boxes' list")
        features = None
        if doc.get("features"):
            try:
                features = FeatureGrid.from_bytes(base64.b64decode(doc["features"], validate=True))
            except (ValueError, FormatError) as exc:
                raise ProtocolError(f"bad feature payload: {exc}") from exc
        return ExpertProposal(tuple(_parse_box(b) for b in boxes), features)

    def _text(self, region, query) -> str:
        doc = self.client.post("/v1/answer", {"image": self._crop(region), "query": query})
        if not isinstance(doc.get("text"), str):
            raise ProtocolError("answer response lacks 'text'")
        return doc["text"]

    def answer(self, region, query):
        return self._text(region, query)

    def parse(self, query):
        text = self._text(Rect.unit(), PARSE_TEMPLATE.format(query=query))
        phrases = [p.strip(" .\"'") for p in text.replace("\n", ",").split(",")]
        phrases = [p for p in phrases if p]
        if not phrases:
            return None
        return TargetSet.of(phrases)
