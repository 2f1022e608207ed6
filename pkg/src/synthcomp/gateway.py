"""Access to text-to-image, captioning and embedding backends.

Two backends implement the same contract:

* :class:`HttpBackend` talks JSON over HTTP to a model server
  (``/v1/info``, ``/v1/txt2img``, ``/v1/caption``, ``/v1/embed``).
* :class:`StubBackend` is a deterministic procedural stand-in used offline.
  Foreground prompts render a single polygon on a near-uniform background and
  the polygon raster is available via :meth:`StubBackend.render`, so extraction
  quality can be scored against ground truth.

:class:`Gateway` wraps either one, enforces counts/sizes/norms and bounds the
number of concurrent requests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import httpx
import numpy as np
from PIL import Image, ImageDraw

from synthcomp.config import DEFAULT_FG_TEMPLATES, derive_seed
from synthcomp.imaging import (
    COLOR_NAMES,
    dominant_border_color,
    from_png_b64,
    load_image,
    nearest_color_name,
    png_b64,
)
from synthcomp.prompts import Caption, CaptionSource

logger = logging.getLogger(__name__)

STUB_EMBED_DIM = 64
STUB_STOPWORDS = frozenset(
    {"a", "an", "the", "of", "on", "in", "with", "and", "photo", "image", "picture", "view"}
)


class BackendError(RuntimeError):
    """Transport failure or error status from a backend."""


class ProtocolError(BackendError):
    """Backend answered but violated the wire contract."""


@dataclass(frozen=True)
class BackendEndpoint:
    base_url: str
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff: float = 0.5

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass(frozen=True, eq=False)
class ImageHandle:
    pixels: np.ndarray
    prompt: Caption | None
    gen_seed: int
    backend_id: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise ValueError(f"expected HxWx3 uint8 pixels, got {self.pixels.shape} {self.pixels.dtype}")
        if min(self.pixels.shape[:2]) < 1:
            raise ValueError("empty image")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def image_seed(seed: int, index: int) -> int:
    """Per-image generation seed; backends must derive it the same way."""
    return derive_seed(seed, "image", index)


def _normalize_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ProtocolError("backend returned a zero embedding vector")
    return vectors / norms


# --------------------------------------------------------------------------
# stub backend


def _hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def _template_regex(template: str) -> re.Pattern:
    parts = [r"\s+".join(map(re.escape, p.split())) for p in re.split(r"<\s*object\s*>", template)]
    body = r"\s*(?P<object>.+?)\s*".join(parts)
    return re.compile(rf"^\s*{body}\s*$", re.IGNORECASE)


class StubBackend:
    """Deterministic procedural backend with the same contract as a model server."""

    backend_id = "stub-v1"

    def __init__(self, fg_templates=DEFAULT_FG_TEMPLATES, latency: float = 0.0):
        self.embed_dim = STUB_EMBED_DIM
        self._fg_patterns = [_template_regex(t) for t in sorted(fg_templates, key=len, reverse=True)]
        self.latency = latency
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_observed_in_flight = 0
        self.calls = 0

    def info(self) -> dict:
        return {"backend_id": self.backend_id, "embed_dim": self.embed_dim}

    def _enter(self):
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_observed_in_flight = max(self.max_observed_in_flight, self.in_flight)
        if self.latency:
            time.sleep(self.latency)

    def _exit(self):
        with self._lock:
            self.in_flight -= 1

    # -- txt2img

    def foreground_object(self, prompt: str) -> str | None:
        for pattern in self._fg_patterns:
            m = pattern.match(prompt)
            if m:
                return m.group("object").strip()
        return None

    def render(self, prompt: str, seed: int, width: int, height: int) -> tuple[np.ndarray, np.ndarray | None]:
        """One image plus the ground-truth object raster (None for context prompts)."""
        rng = np.random.Generator(np.random.Philox(key=seed & ((1 << 64) - 1)))
        if self.foreground_object(prompt) is not None:
            return self._render_foreground(prompt, rng, width, height)
        return self._render_context(prompt, rng, width, height), None

    def _render_foreground(self, prompt, rng, width, height):
        h = _hash64(prompt)
        bg = np.array([240 + (h >> s) % 16 for s in (0, 8, 16)], dtype=np.int64)
        img = bg + rng.integers(-2, 3, size=(height, width, 3))
        palette = [np.array(c) for name, c in COLOR_NAMES.items() if name not in ("white", "yellow", "pink", "cyan")]
        color = palette[int(rng.integers(len(palette)))]
        n = int(rng.integers(3, 9))
        radius = rng.uniform(0.22, 0.38) * min(width, height)
        cx = width / 2 + rng.uniform(-0.05, 0.05) * width
        cy = height / 2 + rng.uniform(-0.05, 0.05) * height
        phase = rng.uniform(0, 2 * np.pi)
        step = 2 * np.pi / n
        angles = phase + step * np.arange(n) + rng.uniform(-0.25, 0.25, n) * step
        radii = radius * rng.uniform(0.8, 1.0, n)
        points = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for r, a in zip(radii, angles)]
        canvas = Image.new("L", (width, height), 0)
        ImageDraw.Draw(canvas).polygon(points, fill=1)
        mask = np.asarray(canvas, dtype=bool)
        obj = color + rng.integers(-3, 4, size=(height, width, 3))
        img = np.where(mask[..., None], obj, img)
        return np.clip(img, 0, 255).astype(np.uint8), mask

    def _render_context(self, prompt, rng, width, height):
        tokens = re.findall(r"[a-z0-9]+", prompt.lower())
        base = np.array([_hash64("|".join(tokens)) >> s & 0xFF for s in (0, 8, 16)], dtype=np.int64)
        base = 40 + base * 175 // 255
        ys, xs = np.mgrid[0:height, 0:width]
        direction = rng.uniform(-1, 1, 2)
        gradient = 5 * (direction[0] * xs / max(width - 1, 1) + direction[1] * ys / max(height - 1, 1))
        img = base + gradient[..., None].astype(np.int64)
        for _ in range(int(rng.integers(2, 6))):
            x0, x1 = sorted(rng.integers(0, width + 1, 2))
            y0, y1 = sorted(rng.integers(0, height + 1, 2))
            img[y0:y1, x0:x1] += int(rng.integers(-10, 11))
        img = img + rng.integers(-5, 6, size=(height, width, 3))
        return np.clip(img, 0, 255).astype(np.uint8)

    def txt2img(self, prompt: str, n: int, seed: int, width: int, height: int) -> list[np.ndarray]:
        self._enter()
        try:
            return [self.render(prompt, image_seed(seed, i), width, height)[0] for i in range(n)]
        finally:
            self._exit()

    # -- caption

    @staticmethod
    def describe(pixels: np.ndarray) -> tuple[str, str]:
        """(border color word, shape word) of an image."""
        bg = np.array(dominant_border_color(pixels))
        color = nearest_color_name(bg)
        dist = np.sqrt(((pixels.astype(float) - bg) ** 2).sum(axis=2))
        fg = dist > 40
        count = int(fg.sum())
        if count < 0.01 * fg.size:
            return color, "nothing"
        rows, cols = np.flatnonzero(fg.any(axis=1)), np.flatnonzero(fg.any(axis=0))
        fill = count / ((rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1))
        if fill >= 0.9:
            return color, "block"
        if fill >= 0.6:
            return color, "round"
        return color, "wedge"

    def caption(self, pixels: np.ndarray, k: int) -> list[str]:
        self._enter()
        try:
            color, shape = self.describe(pixels)
            forms = [
                "a photo of {c} background with {s}",
                "an image of {s} on a {c} background",
                "a {c} scene with {s}",
            ]
            return [
                forms[i].format(c=color, s=shape) if i < len(forms) else f"a photo of {color} background with {shape}, take {i}"
                for i in range(k)
            ]
        finally:
            self._exit()

    # -- embed

    def embed_text(self, text: str) -> np.ndarray:
        vec = np.zeros(self.embed_dim)
        tokens = [t for t in re.findall(r"[a-z0-9]+", text.lower()) if t not in STUB_STOPWORDS]
        for token in tokens or ["<empty>"]:
            h = _hash64(token)
            vec[h % self.embed_dim] += 1.0 if (h >> 32) & 1 else -1.0
        if not vec.any():
            vec[_hash64(text) % self.embed_dim] = 1.0
        return vec / np.linalg.norm(vec)

    def embed(self, texts: list[str], images: list[np.ndarray]) -> np.ndarray:
        self._enter()
        try:
            rows = [self.embed_text(t) for t in texts]
            rows += [self.embed_text(self.caption_text(img)) for img in images]
            return np.array(rows).reshape(len(rows), self.embed_dim)
        finally:
            self._exit()

    def caption_text(self, pixels: np.ndarray) -> str:
        color, shape = self.describe(pixels)
        return f"a photo of {color} background with {shape}"


# --------------------------------------------------------------------------
# HTTP backend


class HttpBackend:
    def __init__(self, endpoint: BackendEndpoint, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self._client = client or httpx.Client(base_url=endpoint.base_url, timeout=endpoint.timeout)
        self._info = None

    def close(self):
        self._client.close()

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        last_error = None
        for attempt in range(self.endpoint.max_retries):
            try:
                response = self._client.request(method, path, json=payload)
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if response.status_code < 400:
                    try:
                        return response.json()
                    except ValueError:
                        raise ProtocolError(f"{path}: response is not JSON") from None
                if response.status_code < 500:
                    raise BackendError(f"{path}: HTTP {response.status_code}: {response.text[:200]}")
                last_error = f"HTTP {response.status_code}"
            if attempt + 1 < self.endpoint.max_retries:
                time.sleep(self.endpoint.backoff * 2**attempt)
        raise BackendError(f"{path}: failed after {self.endpoint.max_retries} attempts ({last_error})")

    @staticmethod
    def _field(body: dict, key: str, path: str):
        if not isinstance(body, dict) or key not in body:
            raise ProtocolError(f"{path}: response missing {key!r}")
        return body[key]

    def info(self) -> dict:
        if self._info is None:
            body = self._request("GET", "/v1/info")
            self._info = {
                "backend_id": str(self._field(body, "backend_id", "/v1/info")),
                "embed_dim": int(self._field(body, "embed_dim", "/v1/info")),
            }
        return self._info

    @property
    def backend_id(self) -> str:
        return self.info()["backend_id"]

    @property
    def embed_dim(self) -> int:
        return self.info()["embed_dim"]

    def txt2img(self, prompt, n, seed, width, height):
        body = self._request(
            "POST", "/v1/txt2img", {"prompt": prompt, "n": n, "seed": seed, "width": width, "height": height}
        )
        images = self._field(body, "images", "/v1/txt2img")
        try:
            return [from_png_b64(item) for item in images]
        except Exception as exc:
            raise ProtocolError(f"/v1/txt2img: undecodable image ({exc})") from None

    def caption(self, pixels, k):
        body = self._request("POST", "/v1/caption", {"image": png_b64(pixels), "k": k})
        return [str(c) for c in self._field(body, "captions", "/v1/caption")]

    def embed(self, texts, images):
        body = self._request(
            "POST", "/v1/embed", {"texts": list(texts), "images": [png_b64(p) for p in images]}
        )
        dim = int(self._field(body, "dim", "/v1/embed"))
        vectors = self._field(body, "vectors", "/v1/embed")
        if any(len(v) != dim for v in vectors):
            raise ProtocolError("/v1/embed: dimension mismatch within batch")
        return np.asarray(vectors, dtype=float).reshape(len(vectors), dim)


# --------------------------------------------------------------------------
# gateway


class Gateway:
    """Validated, concurrency-bounded access to a backend."""

    def __init__(self, backend, image_size=(512, 512), max_in_flight: int = 4):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.backend = backend
        self.width, self.height = image_size
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._embed_dim = None

    @classmethod
    def stub(cls, config, max_in_flight: int = 4) -> Gateway:
        return cls(StubBackend(config.fg_templates), config.image_size, max_in_flight)

    @classmethod
    def http(cls, endpoint: BackendEndpoint, image_size=(512, 512)) -> Gateway:
        return cls(HttpBackend(endpoint), image_size, endpoint.max_in_flight)

    @property
    def backend_id(self) -> str:
        return self.backend.info()["backend_id"]

    @property
    def embed_dim(self) -> int:
        if self._embed_dim is None:
            self._embed_dim = int(self.backend.info()["embed_dim"])
        return self._embed_dim

    def _call(self, fn, *args):
        with self._slots:
            return fn(*args)

    def map(self, fn, items) -> list:
        """``[fn(x) for x in items]`` with up to ``max_in_flight`` calls running at once."""
        items = list(items)
        if len(items) <= 1 or self.max_in_flight == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(fn, items))

    def generate_images(self, prompt: Caption | str, n: int, seed: int) -> list[ImageHandle]:
        if n < 0:
            raise ValueError("n must be >= 0")
        if isinstance(prompt, str):
            prompt = Caption(prompt)
        if n == 0:
            return []
        images = self._call(self.backend.txt2img, prompt.text, n, seed, self.width, self.height)
        if len(images) != n:
            raise ProtocolError(f"txt2img returned {len(images)} images, expected {n}")
        backend_id = self.backend_id
        handles = []
        for i, pixels in enumerate(images):
            if pixels.shape[:2] != (self.height, self.width):
                raise ProtocolError(
                    f"txt2img image {i} is {pixels.shape[1]}x{pixels.shape[0]}, expected {self.width}x{self.height}"
                )
            handles.append(ImageHandle(np.ascontiguousarray(pixels, dtype=np.uint8), prompt, image_seed(seed, i), backend_id))
        return handles

    def caption_image(self, image, k: int, provenance: str = "") -> list[Caption]:
        if k < 0:
            raise ValueError("k must be >= 0")
        if k == 0:
            return []
        if isinstance(image, ImageHandle):
            pixels = image.pixels
        elif isinstance(image, np.ndarray):
            pixels = image
        else:
            provenance = provenance or Path(image).name
            pixels = load_image(image)
        captions = self._call(self.backend.caption, pixels, k)
        if len(captions) != k:
            raise ProtocolError(f"caption returned {len(captions)} captions, expected {k}")
        return [Caption(c, CaptionSource.CDI_CAPTION, provenance) for c in captions]

    def embed(self, texts=(), images=()) -> np.ndarray:
        """Unit vectors, texts first then images, one row per input."""
        texts = [str(t) for t in texts]
        pixels = [im.pixels if isinstance(im, ImageHandle) else im for im in images]
        if not texts and not pixels:
            raise ValueError("embed needs at least one input")
        vectors = self._call(self.backend.embed, texts, pixels)
        if vectors.shape[0] != len(texts) + len(pixels):
            raise ProtocolError(f"embed returned {vectors.shape[0]} vectors for {len(texts) + len(pixels)} inputs")
        if vectors.shape[1] != self.embed_dim:
            raise ProtocolError(f"embed returned dimension {vectors.shape[1]}, handshake said {self.embed_dim}")
        return _normalize_rows(vectors.astype(float))


# --------------------------------------------------------------------------
# stub HTTP server (serves StubBackend over the wire protocol)


def make_stub_handler(backend: StubBackend):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def _send(self, status: int, body: dict):
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/v1/info":
                self._send(200, backend.info())
            else:
                self._send(404, {"error": "not found"})

        def do_POST(self):
            try:
                body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
                if self.path == "/v1/txt2img":
                    images = backend.txt2img(body["prompt"], int(body["n"]), int(body["seed"]), int(body["width"]), int(body["height"]))
                    self._send(200, {"images": [png_b64(im) for im in images]})
                elif self.path == "/v1/caption":
                    self._send(200, {"captions": backend.caption(from_png_b64(body["image"]), int(body["k"]))})
                elif self.path == "/v1/embed":
                    vectors = backend.embed(body.get("texts", []), [from_png_b64(b) for b in body.get("images", [])])
                    self._send(200, {"dim": backend.embed_dim, "vectors": vectors.tolist()})
                else:
                    self._send(404, {"error": "not found"})
            except (KeyError, ValueError, TypeError) as exc:
                self._send(400, {"error": str(exc)})

    return Handler


def serve_stub(host: str = "127.0.0.1", port: int = 0, backend: StubBackend | None = None) -> ThreadingHTTPServer:
    """Start a stub model server on a daemon thread; ``server.server_address`` gives the port."""
    server = ThreadingHTTPServer((host, port), make_stub_handler(backend or StubBackend()))
    server.daemon_threads = True
    threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="Serve the procedural stub backend over HTTP.")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    args = parser.parse_args()
    srv = ThreadingHTTPServer((args.host, args.port), make_stub_handler(StubBackend()))
    print(f"stub backend on http://{args.host}:{srv.server_address[1]}")
    srv.serve_forever()
