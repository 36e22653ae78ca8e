"""Multi-round zoom-in conversations against a chat-completions endpoint.

Each model turn is parsed as a reasoning trace.  A grounded turn is answered
with a crop of the *original* image (boxes are always read in original-image
coordinates) appended as a new user message; an answered, malformed or
round-capped turn ends the episode.

Wire format (request body, compact JSON)::

    {"max_tokens": 512, "messages": [...], "model": "...", "temperature": 1.0}

with messages of the form ``{"role": "user", "content": [{"type": "text",
"text": ...}, {"type": "image_url", "image_url": {"url":
"data:image/png;base64,..."}}]}`` and ``{"role": "assistant", "content":
"<model text>"}``.  The reply text is read from
``choices[0].message.content``.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import httpx
import numpy as np
from PIL import Image

from .errors import DegenerateBox, ProtocolError, TransportError
from .geometry import BBox, PixelGrid, clamp_bbox, crop
from .trace import PromptMode, PromptSpec, ReasoningTrace, Terminal, parse_trace, render_prompt

log = logging.getLogger(__name__)

TOKEN_ENV = "GROUNDZOOM_API_TOKEN"
RETRY_STATUSES = {408, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class EpisodeConfig:
    endpoint: str
    model_name: str = "default"
    max_rounds: int = 5
    temperature: float = 1.0
    max_tokens: int = 512
    timeout_ms: int = 30000
    retry_limit: int = 2
    backoff_s: float = 0.05
    keep_prior_crops: bool = True
    crop_dir: str | None = None
    prompt_mode: PromptMode = PromptMode.GROUNDED_REASONING

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        object.__setattr__(self, "prompt_mode", PromptMode(self.prompt_mode))

    @property
    def url(self) -> str:
        base = self.endpoint.rstrip("/")
        if base.endswith("/chat/completions"):
            return base
        return base + "/chat/completions"


@dataclass
class RoundRecord:
    model_text: str
    parsed: ReasoningTrace
    bbox: BBox | None = None
    crop_ref: str | None = None

    def to_dict(self) -> dict:
        return {"model_text": self.model_text, "parsed": self.parsed.to_dict(),
                "bbox": self.bbox.as_list() if self.bbox is not None else None,
                "crop_ref": self.crop_ref}


@dataclass
class TrajectoryRecord:
    sample_id: str
    rounds: list[RoundRecord] = field(default_factory=list)
    final_answer: str | None = None
    zoom_count: int = 0
    wall_ms: int = 0
    error: dict | None = None

    @property
    def transport_failed(self) -> bool:
        return self.error is not None and self.error.get("type") == "transport"

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "rounds": [r.to_dict() for r in self.rounds],
                "final_answer": self.final_answer, "zoom_count": self.zoom_count,
                "wall_ms": self.wall_ms, "error": self.error}

    @classmethod
    def from_dict(cls, d: dict, round_cap: int = 5) -> "TrajectoryRecord":
        rounds = [RoundRecord(r["model_text"], parse_trace(r["model_text"], round_cap),
                              BBox(*r["bbox"]) if r.get("bbox") is not None else None,
                              r.get("crop_ref"))
                  for r in d.get("rounds", [])]
        return cls(d["sample_id"], rounds, d.get("final_answer"), int(d.get("zoom_count", 0)),
                   int(d.get("wall_ms", 0)), d.get("error"))


def load_image(path) -> PixelGrid:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return PixelGrid(np.asarray(im, dtype=np.uint8))


def encode_png(img: PixelGrid) -> str:
    px = img.pixels
    arr = px[:, :, 0] if px.shape[2] == 1 else px
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def image_part(img: PixelGrid) -> dict:
    return {"type": "image_url", "image_url": {"url": "data:image/png;base64," + encode_png(img)}}


def initial_messages(cfg: EpisodeConfig, image: PixelGrid, question: str) -> list[dict]:
    prompt = render_prompt(PromptSpec(question, cfg.prompt_mode))
    return [{"role": "user", "content": [{"type": "text", "text": prompt}, image_part(image)]}]


def request_body(cfg: EpisodeConfig, messages: list[dict]) -> bytes:
    body = {"model": cfg.model_name, "messages": messages,
            "temperature": cfg.temperature, "max_tokens": cfg.max_tokens}
    return json.dumps(body, separators=(",", ":"), sort_keys=True).encode("utf-8")


_OMITTED = {"type": "text", "text": "[earlier crop omitted]"}


def append_crop(messages: list[dict], model_text: str, region: PixelGrid, keep_prior: bool) -> list[dict]:
    """Next conversation state after a grounded turn."""
    out = list(messages)
    if not keep_prior:
        out = [m if not m.get("_crop") else {"role": "user", "content": [_OMITTED], "_crop": True}
               for m in out]
    out.append({"role": "assistant", "content": model_text})
    out.append({"role": "user", "content": [image_part(region)], "_crop": True})
    return out


def _wire(messages: list[dict]) -> list[dict]:
    return [{k: v for k, v in m.items() if not k.startswith("_")} for m in messages]


def extract_text(reply) -> str:
    try:
        content = reply["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"reply has no message content: {exc!r}") from None
    if isinstance(content, list):
        parts = [p.get("text") for p in content if isinstance(p, dict) and p.get("type") == "text"]
        if not parts or any(not isinstance(p, str) for p in parts):
            raise ProtocolError("reply content has no text part")
        content = "".join(parts)
    if not isinstance(content, str):
        raise ProtocolError("reply content is not text")
    return content


def crop_key(sample_id: str, round_index: int, box: BBox) -> str:
    raw = f"{sample_id}|{round_index}|{box.x1!r},{box.y1!r},{box.x2!r},{box.y2!r}"
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:20]


class ChatTransport:
    """POSTs request bodies with bounded exponential-backoff retries."""

    def __init__(self, cfg: EpisodeConfig, client: httpx.Client | None = None, token: str | None = None):
        self.cfg = cfg
        self._own = client is None
        self.client = client or httpx.Client(timeout=cfg.timeout_ms / 1000.0)
        token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.headers = {"Content-Type": "application/json"}
        if token:
            self.headers["Authorization"] = f"Bearer {token}"

    def close(self):
        if self._own:
            self.client.close()

    def post(self, body: bytes) -> dict:
        last: TransportError | None = None
        for attempt in range(self.cfg.retry_limit + 1):
            if attempt:
                time.sleep(self.cfg.backoff_s * 2 ** (attempt - 1))
            try:
                resp = self.client.post(self.cfg.url, content=body, headers=self.headers,
                                        timeout=self.cfg.timeout_ms / 1000.0)
            except httpx.TimeoutException as exc:
                last = TransportError(f"timeout: {exc}", status=None)
                continue
            except httpx.HTTPError as exc:
                last = TransportError(f"transport: {exc}", status=None)
                continue
            if resp.status_code in RETRY_STATUSES:
                last = TransportError(f"HTTP {resp.status_code}", status=resp.status_code)
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}", status=resp.status_code)
            try:
                return resp.json()
            except ValueError:
                raise ProtocolError("reply is not JSON") from None
        raise last


def run_episode(cfg: EpisodeConfig, image: PixelGrid, question: str, sample_id: str = "",
                transport: ChatTransport | None = None) -> TrajectoryRecord:
    """Run one conversation; failures are recorded on the result, never raised."""
    own = transport is None
    transport = transport or ChatTransport(cfg)
    start = time.monotonic()
    rec = TrajectoryRecord(sample_id)
    try:
        messages = initial_messages(cfg, image, question)
        for r in range(cfg.max_rounds):
            reply = transport.post(request_body(cfg, _wire(messages)))
            text = extract_text(reply)
            parsed = parse_trace(text, round_cap=cfg.max_rounds)
            rnd = RoundRecord(text, parsed)
            rec.rounds.append(rnd)
            rec.zoom_count += parsed.num_rounds
            if parsed.terminal is not Terminal.GROUNDED or r + 1 >= cfg.max_rounds:
                break
            box = clamp_bbox(parsed.boxes[-1], image.width, image.height)
            region = crop(image, box)
            rnd.bbox = box
            rnd.crop_ref = crop_key(sample_id, r, box)
            if cfg.crop_dir:
                _store_crop(cfg.crop_dir, rnd.crop_ref, region)
            messages = append_crop(messages, text, region, cfg.keep_prior_crops)
    except TransportError as exc:
        rec.error = {"type": "transport", "status": exc.status, "message": str(exc)}
    except ProtocolError as exc:
        rec.error = {"type": "protocol", "message": str(exc)}
    except DegenerateBox as exc:
        rec.error = {"type": "degenerate_box", "message": str(exc)}
    finally:
        if own:
            transport.close()
    if rec.error is not None:
        log.warning("episode %s ended with %s error: %s", sample_id, rec.error["type"], rec.error["message"])
    if rec.rounds and rec.rounds[-1].parsed.terminal is Terminal.ANSWERED:
        rec.final_answer = rec.rounds[-1].parsed.final_answer
    rec.wall_ms = int((time.monotonic() - start) * 1000)
    return rec


def _store_crop(crop_dir: str, key: str, region: PixelGrid):
    os.makedirs(crop_dir, exist_ok=True)
    path = os.path.join(crop_dir, key + ".png")
    if not os.path.exists(path):
        with open(path, "wb") as f:
            f.write(base64.b64decode(encode_png(region)))


def replay_requests(cfg: EpisodeConfig, image: PixelGrid, question: str, rec: TrajectoryRecord) -> list[bytes]:
    """Rebuild every request body of an episode from its record."""
    bodies = []
    messages = initial_messages(cfg, image, question)
    for rnd in rec.rounds:
        bodies.append(request_body(cfg, _wire(messages)))
        if rnd.bbox is None:
            break
        messages = append_crop(messages, rnd.model_text, crop(image, rnd.bbox), cfg.keep_prior_crops)
    return bodies


def _sample_episode(cfg, sample, transport, image_loader):
    sid = str(sample.get("sample_id", ""))
    try:
        image = image_loader(sample["image_path"])
        question = sample["question"]
    except Exception as exc:  # noqa: BLE001 - isolate per-sample failures
        return TrajectoryRecord(sid, error={"type": "input", "message": f"{type(exc).__name__}: {exc}"})
    return run_episode(cfg, image, question, sid, transport)


def run_batch(cfg: EpisodeConfig, samples, parallelism: int = 1, image_loader=load_image,
              transport: ChatTransport | None = None):
    """Yield one TrajectoryRecord per sample, in input order.

    At most ``parallelism`` episodes are in flight; the input iterable is
    consumed lazily.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    own = transport is None
    if own:
        client = httpx.Client(timeout=cfg.timeout_ms / 1000.0,
                              limits=httpx.Limits(max_connections=parallelism))
        transport = ChatTransport(cfg, client)
    try:
        if parallelism == 1:
            for s in samples:
                yield _sample_episode(cfg, s, transport, image_loader)
            return
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            pending = deque()
            for s in samples:
                if len(pending) >= parallelism:
                    yield pending.popleft().result()
                pending.append(pool.submit(_sample_episode, cfg, s, transport, image_loader))
            while pending:
                yield pending.popleft().result()
    finally:
        if own:
            client.close()
