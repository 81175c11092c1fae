"""Client for scene-generation and inpainting services.

Two interchangeable backends sit behind one request interface: an HTTP
backend speaking the JSON wire protocol below, and an in-process stub that
colorizes semantic maps with the class palette and fulfils inpainting through
the copy-paste compositor. Every request carries an idempotency key derived
from its own content, so retrying after a transport failure cannot duplicate
work on a conforming service.

Wire protocol (all bodies UTF-8 JSON):
    POST /v1/scene    {semantic_map_png_b64, prompt, seed, idempotency_key}
    POST /v1/inpaint  {image_png_b64, box: {cx, cy, w, h}, concept,
                       scene_context, seed, idempotency_key}
    200 replies       {image_png_b64, mask_png_b64?, backend_id}
    non-200 replies   {code, message}
    GET /v1/capabilities  {backend_id, max_width, max_height, endpoints}

Inpainting replies may only edit pixels within an 8-pixel dilation of the
requested box; anything else raises EditLeakageError. Replies without a mask
get one synthesized by per-channel differencing (threshold 12/255) followed
by mask refinement.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests
from PIL import Image

from .compositor import (
    AnomalyMask,
    PasteResult,
    SceneImage,
    paste_object,
    refine_mask,
)
from .cutouts import get_cutout
from .errors import (
    BackendError,
    ConfigError,
    DimensionMismatchError,
    EditLeakageError,
    ServiceTimeout,
    TransportError,
)
from .metrics import PIXEL_ANOMALY
from .placer import PseudoBox
from .scene import (
    SceneAttributes,
    SceneKind,
    SemanticMap,
    TimeOfDay,
    Weather,
    colorize_semantic_map,
)

STUB_ENDPOINT = "stub"
EDIT_MARGIN = 8  # pixels of slack around the box an inpainting edit may use
DIFF_THRESHOLD = 12  # per-channel difference that counts as an edit


def build_prompt(attrs: SceneAttributes) -> str:
    """Render attributes to the fixed prompt template.

    ``<caption>, <scene> scene, <weather> weather, <time_of_day>``; an empty
    caption drops the leading clause.
    """
    tail = f"{attrs.scene.value} scene, {attrs.weather.value} weather, {attrs.time_of_day.value}"
    caption = attrs.caption.strip()
    return f"{caption}, {tail}" if caption else tail


def parse_prompt(prompt: str) -> SceneAttributes:
    """Inverse of build_prompt; raises ConfigError on malformed prompts."""
    parts = prompt.rsplit(", ", 3)
    if len(parts) < 3:
        raise ConfigError(f"prompt does not match template: {prompt!r}")
    if len(parts) == 3:
        caption, (scene_tok, weather_tok, time_tok) = "", parts
    else:
        caption, scene_tok, weather_tok, time_tok = parts
    if not scene_tok.endswith(" scene") or not weather_tok.endswith(" weather"):
        raise ConfigError(f"prompt does not match template: {prompt!r}")
    try:
        return SceneAttributes(
            scene=SceneKind(scene_tok[: -len(" scene")]),
            weather=Weather(weather_tok[: -len(" weather")]),
            time_of_day=TimeOfDay(time_tok),
            caption=caption,
        )
    except ValueError as exc:
        raise ConfigError(f"prompt has unknown attribute: {exc}")


def scene_context_string(attrs: SceneAttributes) -> str:
    """Free-text context passed to inpainting, e.g. 'Tunnel, Rain, Daytime'."""
    def pretty(token: str) -> str:
        return token.replace("_", " ").title()

    return ", ".join(
        pretty(t) for t in (attrs.scene.value, attrs.weather.value, attrs.time_of_day.value)
    )


@dataclass(frozen=True)
class SceneGenRequest:
    semantic_map: SemanticMap
    prompt: str
    seed: int


@dataclass(frozen=True)
class InpaintRequest:
    image: SceneImage
    box: PseudoBox
    concept: str
    scene_context: str
    seed: int

    def __post_init__(self):
        if not self.concept:
            raise ConfigError("inpaint request needs a concept")


@dataclass(frozen=True)
class GenResult:
    image: SceneImage
    mask: AnomalyMask | None
    backend_id: str
    latency_ms: float


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff for transport failures only."""

    max_retries: int = 3
    base_delay_ms: float = 500.0
    factor: float = 2.0

    def __post_init__(self):
        if self.max_retries < 0 or self.base_delay_ms < 0 or self.factor < 1:
            raise ConfigError(f"bad retry policy: {self}")

    def delay_s(self, attempt: int) -> float:
        return self.base_delay_ms * (self.factor ** attempt) / 1000.0


def encode_png_b64(array: np.ndarray, mode: str) -> str:
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_png_b64(payload: str, mode: str) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as exc:
        raise BackendError("malformed_reply", f"undecodable PNG payload: {exc}")
    if img.mode != mode:
        img = img.convert(mode)
    return np.asarray(img, dtype=np.uint8)


def idempotency_key(payload: dict) -> str:
    """Content hash of a wire payload, excluding the key field itself."""
    body = {k: v for k, v in payload.items() if k != "idempotency_key"}
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def scene_payload(req: SceneGenRequest) -> dict:
    payload = {
        "semantic_map_png_b64": encode_png_b64(req.semantic_map.labels, "L"),
        "prompt": req.prompt,
        "seed": int(req.seed),
    }
    payload["idempotency_key"] = idempotency_key(payload)
    return payload


def inpaint_payload(req: InpaintRequest) -> dict:
    payload = {
        "image_png_b64": encode_png_b64(req.image.rgb, "RGB"),
        "box": {"cx": req.box.cx, "cy": req.box.cy, "w": req.box.w, "h": req.box.h},
        "concept": req.concept,
        "scene_context": req.scene_context,
        "seed": int(req.seed),
    }
    payload["idempotency_key"] = idempotency_key(payload)
    return payload


class StubBackend:
    """Deterministic in-process backend: palette scenes, copy-paste inpaints."""

    backend_id = "stub-v1"

    def capabilities(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "max_width": 8192,
            "max_height": 8192,
            "endpoints": ["scene", "inpaint"],
        }

    def scene(self, req: SceneGenRequest) -> tuple[SceneImage, AnomalyMask | None, str]:
        rgb = colorize_semantic_map(req.semantic_map)
        return SceneImage(rgb=rgb), None, self.backend_id

    def inpaint(self, req: InpaintRequest) -> tuple[SceneImage, AnomalyMask | None, str]:
        cutout = get_cutout(req.concept)
        result: PasteResult = paste_object(req.image, cutout, req.box, harmonize_colors=True)
        return result.image, result.mask, self.backend_id


class HttpBackend:
    """Speaks the JSON wire protocol against a remote endpoint."""

    def __init__(self, endpoint: str, timeout_s: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_s

    def _post(self, path: str, payload: dict) -> dict:
        url = f"{self.endpoint}{path}"
        try:
            resp = requests.post(url, json=payload, timeout=self.timeout_s)
        except requests.Timeout as exc:
            raise ServiceTimeout(f"{url}: {exc}")
        except requests.RequestException as exc:
            raise TransportError(f"{url}: {exc}")
        if resp.status_code != 200:
            try:
                body = resp.json()
                code, message = str(body["code"]), str(body["message"])
            except Exception:
                code, message = str(resp.status_code), resp.text[:200]
            raise BackendError(code, message)
        try:
            return resp.json()
        except ValueError as exc:
            raise BackendError("malformed_reply", f"non-JSON 200 reply: {exc}")

    def capabilities(self) -> dict:
        url = f"{self.endpoint}/v1/capabilities"
        try:
            resp = requests.get(url, timeout=self.timeout_s)
        except requests.Timeout as exc:
            raise ServiceTimeout(f"{url}: {exc}")
        except requests.RequestException as exc:
            raise TransportError(f"{url}: {exc}")
        if resp.status_code != 200:
            raise BackendError(str(resp.status_code), resp.text[:200])
        try:
            return resp.json()
        except ValueError as exc:
            raise BackendError("malformed_reply", f"non-JSON capabilities: {exc}")

    def scene(self, req: SceneGenRequest) -> tuple[SceneImage, AnomalyMask | None, str]:
        reply = self._post("/v1/scene", scene_payload(req))
        return _decode_reply(reply)

    def inpaint(self, req: InpaintRequest) -> tuple[SceneImage, AnomalyMask | None, str]:
        reply = self._post("/v1/inpaint", inpaint_payload(req))
        return _decode_reply(reply)


def _decode_reply(reply: dict) -> tuple[SceneImage, AnomalyMask | None, str]:
    if not isinstance(reply, dict) or "image_png_b64" not in reply:
        raise BackendError("malformed_reply", "reply is missing image_png_b64")
    rgb = decode_png_b64(reply["image_png_b64"], "RGB")
    mask = None
    if reply.get("mask_png_b64"):
        grid = decode_png_b64(reply["mask_png_b64"], "L")
        try:
            mask = AnomalyMask(grid=grid)
        except Exception as exc:
            raise BackendError("malformed_reply", f"bad mask payload: {exc}")
    backend_id = str(reply.get("backend_id", "unknown"))
    return SceneImage(rgb=rgb), mask, backend_id


def make_backend(endpoint: str, timeout_s: float = 30.0):
    if endpoint == STUB_ENDPOINT:
        return StubBackend()
    if endpoint.startswith("http://") or endpoint.startswith("https://"):
        return HttpBackend(endpoint, timeout_s=timeout_s)
    raise ConfigError(f"endpoint must be 'stub' or an http(s) URL, got {endpoint!r}")


def _edit_window(box: PseudoBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Inclusive-exclusive rect the service is allowed to edit."""
    x0, y0, x1, y1 = box.bounds
    ex0 = max(0, int(np.floor(x0)) - EDIT_MARGIN)
    ey0 = max(0, int(np.floor(y0)) - EDIT_MARGIN)
    ex1 = min(width, int(np.ceil(x1)) + EDIT_MARGIN)
    ey1 = min(height, int(np.ceil(y1)) + EDIT_MARGIN)
    return ex0, ey0, ex1, ey1


def _diff_mask(before: SceneImage, after: SceneImage) -> AnomalyMask:
    """Edited-pixel mask from per-channel differencing plus refinement."""
    delta = np.abs(before.rgb.astype(np.int16) - after.rgb.astype(np.int16))
    changed = (delta > DIFF_THRESHOLD).any(axis=2)
    raw = np.where(changed, np.uint8(PIXEL_ANOMALY), np.uint8(0))
    return refine_mask(raw)


class GenerationClient:
    """Request runner: retry on transport failure, validate every reply."""

    def __init__(
        self,
        endpoint: str = STUB_ENDPOINT,
        policy: RetryPolicy | None = None,
        timeout_s: float = 30.0,
        max_in_flight: int = 4,
    ):
        if max_in_flight < 1:
            raise ConfigError(f"max_in_flight must be >= 1, got {max_in_flight}")
        self.backend = make_backend(endpoint, timeout_s=timeout_s)
        self.policy = policy or RetryPolicy()
        self._gate = threading.BoundedSemaphore(max_in_flight)

    def capabilities(self) -> dict:
        with self._gate:
            return self.backend.capabilities()

    def _call(self, fn, req):
        last: Exception | None = None
        for attempt in range(self.policy.max_retries + 1):
            try:
                with self._gate:
                    started = time.perf_counter()
                    image, mask, backend_id = fn(req)
                    latency = (time.perf_counter() - started) * 1000.0
                return image, mask, backend_id, latency
            except TransportError as exc:
                last = exc
                if attempt < self.policy.max_retries:
                    time.sleep(self.policy.delay_s(attempt))
        raise last

    def request_scene(self, req: SceneGenRequest) -> GenResult:
        """Generate a scene image for a semantic map; dims must match."""
        image, mask, backend_id, latency = self._call(self.backend.scene, req)
        want = (req.semantic_map.height, req.semantic_map.width)
        if (image.height, image.width) != want:
            raise DimensionMismatchError(
                f"scene reply is {image.width}x{image.height}, "
                f"request was {want[1]}x{want[0]}"
            )
        return GenResult(image=image, mask=None, backend_id=backend_id, latency_ms=latency)

    def request_inpaint(self, req: InpaintRequest) -> GenResult:
        """Inpaint one box; edits are confined to the dilated box window."""
        image, mask, backend_id, latency = self._call(self.backend.inpaint, req)
        if (image.height, image.width) != (req.image.height, req.image.width):
            raise DimensionMismatchError(
                f"inpaint reply is {image.width}x{image.height}, "
                f"request was {req.image.width}x{req.image.height}"
            )
        ex0, ey0, ex1, ey1 = _edit_window(req.box, req.image.width, req.image.height)
        outside = req.image.rgb != image.rgb
        outside[ey0:ey1, ex0:ex1] = False
        if outside.any():
            count = int(outside.any(axis=2).sum())
            raise EditLeakageError(
                f"reply changed {count} pixel(s) outside the permitted window "
                f"[{ex0}, {ey0}, {ex1}, {ey1}]"
            )
        if mask is None:
            mask = _diff_mask(req.image, image)
        else:
            if (mask.height, mask.width) != (req.image.height, req.image.width):
                raise DimensionMismatchError(
                    f"inpaint mask is {mask.width}x{mask.height}, "
                    f"request was {req.image.width}x{req.image.height}"
                )
            stray = mask.grid == PIXEL_ANOMALY
            stray[ey0:ey1, ex0:ex1] = False
            if stray.any():
                raise EditLeakageError(
                    f"reply mask marks {int(stray.sum())} pixel(s) outside the "
                    f"permitted window [{ex0}, {ey0}, {ex1}, {ey1}]"
                )
        return GenResult(image=image, mask=mask, backend_id=backend_id, latency_ms=latency)


def request_scene(
    req: SceneGenRequest, endpoint: str = STUB_ENDPOINT, policy: RetryPolicy | None = None
) -> GenResult:
    return GenerationClient(endpoint=endpoint, policy=policy).request_scene(req)


def request_inpaint(
    req: InpaintRequest, endpoint: str = STUB_ENDPOINT, policy: RetryPolicy | None = None
) -> GenResult:
    return GenerationClient(endpoint=endpoint, policy=policy).request_inpaint(req)
