"""Automated CTML coding against a chat-completion HTTP endpoint."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import httpx

from .ctml import FEATURES, LEVELS, ORDINAL, RUBRIC, Coder, CTMLRecord, agreement
from .errors import CodingFailed, ContractViolation, DataError, IncompletePayload, TransportError

log = logging.getLogger(__name__)

RETRY_STATUS = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class CodingRequest:
    video_id: str
    t: int
    features: tuple = FEATURES
    transcript: str | None = None      # words spoken in [t-10, t+10]
    slide_text: str | None = None
    frames: tuple = ()                 # image URLs or data URIs, 1 fps over [t-10, t+10]

    @property
    def center_frame(self):
        return self.frames[len(self.frames) // 2] if self.frames else None

    @classmethod
    def from_dict(cls, d):
        return cls(d["video_id"], int(d["t"]), tuple(d.get("features") or FEATURES),
                   d.get("transcript"), d.get("slide_text"), tuple(d.get("frames") or ()))


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    token_env: str = "VIDPEAKS_CODER_TOKEN"
    max_concurrency: int = 4
    retry_budget: int = 2              # extra attempts after an unusable reply
    timeout: float = 60.0
    transport_attempts: int = 5
    backoff_base: float = 0.5
    temperature: float = 0.0
    seed: int | None = 0
    max_frames: int | None = None      # subsample the frame window when set

    def __post_init__(self):
        if self.retry_budget < 0:
            raise ContractViolation("retry_budget must be >= 0")
        if self.max_concurrency < 1:
            raise ContractViolation("max_concurrency must be >= 1")
        if self.transport_attempts < 1:
            raise ContractViolation("transport_attempts must be >= 1")


# --------------------------------------------------------------------------
# prompt


def _scale(feature):
    if feature in ORDINAL:
        return "integer from 1 (lowest) to 5 (highest)"
    return "0 (absent) or 1 (present)"


def _subsample(frames, limit):
    if limit is None or len(frames) <= limit:
        return list(frames)
    if limit == 1:
        return [frames[len(frames) // 2]]
    step = (len(frames) - 1) / (limit - 1)
    return [frames[round(i * step)] for i in range(limit)]


def build_prompt(request: CodingRequest, max_frames=None) -> dict:
    """Chat payload asking for one JSON object with a key per requested feature."""
    unknown = [f for f in request.features if f not in RUBRIC]
    if unknown:
        raise ContractViolation(f"unknown features {unknown}")
    features = [f for f in FEATURES if f in request.features]
    needs = set()
    for f in features:
        mods = RUBRIC[f][1]
        for mod in mods:
            have = request.transcript is not None if mod == "transcript" else bool(request.frames)
            if not have:
                raise IncompletePayload(f)
        needs.update(mods)

    lines = [
        "You code a moment of an educational lecture video.",
        "Rate only the central five seconds of the material provided.",
        "Answer with a single JSON object and nothing else.",
        "Use exactly these keys, each with an integer value:",
        "",
    ]
    for f in features:
        name, mods, desc, _ = RUBRIC[f]
        lines.append(f'"{f}" ({name}; {_scale(f)}; judged from {", ".join(mods)}): {desc}')
    content = [{"type": "text", "text": "\n".join(lines)}]
    if "transcript" in needs:
        content.append({"type": "text", "text": "Transcript (t-10 s to t+10 s):\n" + request.transcript})
    if request.slide_text is not None:
        content.append({"type": "text", "text": "Slide text:\n" + request.slide_text})
    if "frames" in needs:
        frames = _subsample(request.frames, max_frames)
        content.append({"type": "text", "text": f"{len(frames)} frames sampled at 1 per second, in order:"})
    elif "frame" in needs:
        frames = [request.center_frame]
        content.append({"type": "text", "text": "Center frame:"})
    else:
        frames = []
    content.extend({"type": "image_url", "image_url": {"url": u}} for u in frames)
    return {"messages": [
        {"role": "system", "content": "You are a careful annotator of instructional design features."},
        {"role": "user", "content": content},
    ]}


def parse_reply(text: str, features) -> dict:
    """Strict parse: one JSON object, exactly the requested keys, values in range."""
    try:
        obj = json.loads(text)
    except (TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"reply is not valid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise DataError("reply must be a JSON object")
    missing = [f for f in features if f not in obj]
    extra = [k for k in obj if k not in features]
    if missing or extra:
        raise DataError(f"keys mismatch: missing {missing}, unexpected {extra}")
    for f in features:
        v = obj[f]
        ok = LEVELS if f in ORDINAL else (0, 1)
        if isinstance(v, bool) or not isinstance(v, int) or v not in ok:
            raise DataError(f"{f}={v!r} must be one of {list(ok)}")
    return obj


# --------------------------------------------------------------------------
# transport


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _post(client: httpx.Client, endpoint: EndpointConfig, body: dict, sleep) -> dict:
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(endpoint.token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    waits = []
    for attempt in range(1, endpoint.transport_attempts + 1):
        try:
            resp = client.post(url, json=body, headers=headers, timeout=endpoint.timeout)
        except httpx.TransportError as exc:
            reason = f"{type(exc).__name__}: {exc}"
        else:
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError:
                    raise TransportError("endpoint returned a non-JSON body", attempt, waits) from None
            if resp.status_code not in RETRY_STATUS:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}", attempt, waits)
            reason = f"HTTP {resp.status_code}"
        if attempt == endpoint.transport_attempts:
            raise TransportError(f"gave up after {attempt} attempts ({reason})", attempt, waits)
        wait = endpoint.backoff_base * 2 ** (attempt - 1)
        waits.append(wait)
        log.warning("coder: %s, retrying in %.2fs", reason, wait)
        sleep(wait)
    raise AssertionError("unreachable")


def _reply_text(payload: dict) -> str:
    try:
        return payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        return json.dumps(payload)


def code_moment(client: httpx.Client, request: CodingRequest, endpoint: EndpointConfig,
                audit=None, sleep=time.sleep) -> CTMLRecord:
    """Code one moment; retries unusable replies with an explanatory follow-up.

    ``audit(entry)`` receives one dict per attempt with request/response digests
    and the raw reply text.
    """
    features = [f for f in FEATURES if f in request.features]
    messages = build_prompt(request, endpoint.max_frames)["messages"]
    transcript = []
    for attempt in range(endpoint.retry_budget + 1):
        body = {"model": endpoint.model, "messages": messages, "temperature": endpoint.temperature,
                "response_format": {"type": "json_object"}}
        if endpoint.seed is not None:
            body["seed"] = endpoint.seed
        payload = _post(client, endpoint, body, sleep)
        text = _reply_text(payload)
        transcript.append(text)
        try:
            values = parse_reply(text, features)
            error = None
        except DataError as exc:
            values, error = None, str(exc)
        if audit is not None:
            audit({"video_id": request.video_id, "t": request.t, "attempt": attempt,
                   "request_sha256": _digest(body), "response_sha256": _digest(payload),
                   "model": endpoint.model, "temperature": endpoint.temperature, "seed": endpoint.seed,
                   "raw": text, "error": error})
        if values is not None:
            return CTMLRecord(request.video_id, request.t, coder=Coder.Machine, **values)
        messages = messages + [
            {"role": "assistant", "content": text},
            {"role": "user", "content": f"Your reply could not be used: {error}. "
                                        "Reply again with only the corrected JSON object."},
        ]
    raise CodingFailed(f"{request.video_id}@{request.t}: no usable reply in "
                       f"{endpoint.retry_budget + 1} attempts", transcript)


@dataclass
class BatchResult:
    records: list = field(default_factory=list)      # CTMLRecord or None, input order
    failures: list = field(default_factory=list)     # (index, error message)
    audit: list = field(default_factory=list)


def code_batch(requests, endpoint: EndpointConfig, client: httpx.Client | None = None,
               sleep=time.sleep) -> BatchResult:
    """Code many moments with bounded concurrency; output keeps input order."""
    requests = list(requests)
    own = client is None
    client = client or httpx.Client()
    audits = [[] for _ in requests]

    def work(i):
        try:
            return code_moment(client, requests[i], endpoint, audits[i].append, sleep), None
        except (CodingFailed, TransportError) as exc:
            return None, str(exc)

    try:
        with ThreadPoolExecutor(max_workers=endpoint.max_concurrency) as pool:
            outcomes = list(pool.map(work, range(len(requests))))
    finally:
        if own:
            client.close()
    out = BatchResult()
    for i, (rec, err) in enumerate(outcomes):
        out.records.append(rec)
        if err is not None:
            out.failures.append((i, err))
        out.audit.extend(audits[i])
    return out


def agreement_vs_humans(machine_records, adjudicated_records):
    """Per-feature kappa between Machine and Adjudicated codings."""
    return agreement(machine_records, adjudicated_records)
