"""Mock generation service for tests and local development.

Serves the JSON wire protocol on localhost, fulfilling requests through the
deterministic stub backend. A configurable fault mode lets tests exercise
every client-side failure path:

    ok             well-formed replies
    no_mask        inpaint replies omit the mask field
    wrong_dims     reply images are cropped by 2 pixels
    edit_leakage   reply images carry an edit far outside the box
    stray_mask     reply masks mark a pixel far outside the box
    http_error     every POST fails with a structured 500
    bad_json       200 replies carry a non-JSON body
    drop           connections close without any reply
    drop_first:N   first N POSTs drop, later ones behave like ok

Run standalone: ``python -m climakit.mockserver --port 8008 --fault ok``.
"""

from __future__ import annotations

import argparse
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .compositor import SceneImage
from .genclient import (
    StubBackend,
    decode_png_b64,
    encode_png_b64,
)
from .metrics import PIXEL_ANOMALY
from .placer import PseudoBox
from .scene import DEFAULT_SCHEMA, SemanticMap


class MockService:
    """Owns the HTTP server, its thread, the fault mode, and a request log."""

    def __init__(self, fault: str = "ok", port: int = 0):
        self.fault = fault
        self.drop_budget = 0
        if fault.startswith("drop_first:"):
            self.drop_budget = int(fault.split(":", 1)[1])
            self.fault = "drop_first"
        self.backend = StubBackend()
        self.log: list[dict] = []
        self._lock = threading.Lock()
        handler = _make_handler(self)
        self.server = ThreadingHTTPServer(("127.0.0.1", port), handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockService":
        self.thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)

    def record(self, path: str, payload: dict | None) -> None:
        with self._lock:
            self.log.append(
                {
                    "path": path,
                    "idempotency_key": (payload or {}).get("idempotency_key"),
                }
            )

    def take_drop(self) -> bool:
        """True when this request should be dropped under drop_first."""
        with self._lock:
            if self.drop_budget > 0:
                self.drop_budget -= 1
                return True
        return False

    def __enter__(self) -> "MockService":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def _far_corner(box: PseudoBox, width: int, height: int) -> tuple[int, int]:
    """A pixel far outside any reasonable edit window around the box."""
    x = 0 if box.cx > width / 2 else width - 1
    y = 0 if box.cy > height / 2 else height - 1
    return x, y


def _make_handler(service: MockService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):  # keep pytest output clean
            pass

        def _send_json(self, status: int, obj: dict) -> None:
            body = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_raw(self, status: int, body: bytes) -> None:
            self.send_response(status)
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _drop(self) -> None:
            # Close without writing a response; clients see a reset.
            self.close_connection = True
            self.connection.close()

        def do_GET(self):
            if self.path != "/v1/capabilities":
                self._send_json(404, {"code": "not_found", "message": self.path})
                return
            service.record(self.path, None)
            self._send_json(200, service.backend.capabilities())

        def do_POST(self):
            try:
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length).decode("utf-8"))
            except (ValueError, UnicodeDecodeError):
                self._send_json(400, {"code": "bad_request", "message": "not JSON"})
                return
            service.record(self.path, payload)

            fault = service.fault
            if fault == "drop" or (fault == "drop_first" and service.take_drop()):
                self._drop()
                return
            if fault == "http_error":
                self._send_json(
                    500, {"code": "backend_boom", "message": "synthetic failure"}
                )
                return
            if fault == "bad_json":
                self._send_raw(200, b"this is not json")
                return

            try:
                if self.path == "/v1/scene":
                    reply = self._handle_scene(payload)
                elif self.path == "/v1/inpaint":
                    reply = self._handle_inpaint(payload)
                else:
                    self._send_json(404, {"code": "not_found", "message": self.path})
                    return
            except Exception as exc:
                self._send_json(400, {"code": "bad_request", "message": str(exc)})
                return
            self._send_json(200, reply)

        def _handle_scene(self, payload: dict) -> dict:
            labels = decode_png_b64(payload["semantic_map_png_b64"], "L")
            from .genclient import SceneGenRequest  # local to avoid cycle at import

            req = SceneGenRequest(
                semantic_map=SemanticMap(labels=labels, schema=DEFAULT_SCHEMA),
                prompt=payload.get("prompt", ""),
                seed=int(payload.get("seed", 0)),
            )
            image, _, backend_id = service.backend.scene(req)
            rgb = self._apply_image_faults(image.rgb, None)
            return {"image_png_b64": encode_png_b64(rgb, "RGB"), "backend_id": backend_id}

        def _handle_inpaint(self, payload: dict) -> dict:
            from .genclient import InpaintRequest

            rgb = decode_png_b64(payload["image_png_b64"], "RGB")
            box = PseudoBox(**payload["box"])
            req = InpaintRequest(
                image=SceneImage(rgb=rgb),
                box=box,
                concept=payload["concept"],
                scene_context=payload.get("scene_context", ""),
                seed=int(payload.get("seed", 0)),
            )
            image, mask, backend_id = service.backend.inpaint(req)
            out_rgb = self._apply_image_faults(image.rgb, box)
            reply = {
                "image_png_b64": encode_png_b64(out_rgb, "RGB"),
                "backend_id": backend_id,
            }
            if service.fault == "stray_mask":
                grid = mask.grid.copy()
                x, y = _far_corner(box, grid.shape[1], grid.shape[0])
                grid[y, x] = PIXEL_ANOMALY
                reply["mask_png_b64"] = encode_png_b64(grid, "L")
            elif service.fault != "no_mask" and mask is not None:
                reply["mask_png_b64"] = encode_png_b64(mask.grid, "L")
            return reply

        def _apply_image_faults(
            self, rgb: np.ndarray, box: PseudoBox | None
        ) -> np.ndarray:
            if service.fault == "wrong_dims":
                return rgb[:-2, :-2]
            if service.fault == "edit_leakage" and box is not None:
                out = rgb.copy()
                x, y = _far_corner(box, rgb.shape[1], rgb.shape[0])
                out[y, x] = 255 - out[y, x]
                return out
            return rgb

    return Handler


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Run the mock generation service.")
    parser.add_argument("--port", type=int, default=8008)
    parser.add_argument("--fault", default="ok")
    args = parser.parse_args(argv)
    service = MockService(fault=args.fault, port=args.port)
    print(f"mock service on {service.endpoint} (fault={args.fault})")
    service.start()
    try:
        service.thread.join()
    except KeyboardInterrupt:
        service.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
