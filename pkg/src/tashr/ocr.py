"""Adapters to external OCR engines.

An engine is any command that takes an image path as its last argument and
prints ``{"results": [{"box": [x, y, w, h], "text": "...", "confidence": c}]}``
on stdout. A non-zero exit status is a per-image failure. Responses can be
cached on disk keyed by the SHA-256 of the image bytes and the engine id.
"""

import hashlib
import json
import os
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError

CACHE_ENV = "TASHR_OCR_CACHE"


class OcrError(DataError):
    pass


@dataclass
class OcrResult:
    boxes: list = field(default_factory=list)
    texts: list = field(default_factory=list)
    confidences: list = field(default_factory=list)

    def __post_init__(self):
        if not len(self.boxes) == len(self.texts) == len(self.confidences):
            raise OcrError("OCR result lists differ in length")

    @classmethod
    def from_json(cls, doc):
        try:
            results = doc["results"]
            boxes = [tuple(float(v) for v in r["box"]) for r in results]
            texts = [str(r["text"]) for r in results]
            conf = [float(r.get("confidence", 1.0)) for r in results]
        except (KeyError, TypeError, ValueError) as e:
            raise OcrError(f"malformed OCR response: {e}") from e
        if any(len(b) != 4 for b in boxes):
            raise OcrError("OCR boxes must be [x, y, w, h]")
        if any(not 0.0 <= c <= 1.0 for c in conf):
            raise OcrError("OCR confidences must lie in [0, 1]")
        return cls(boxes, texts, conf)

    def to_json(self):
        return {"results": [{"box": list(b), "text": t, "confidence": c}
                            for b, t, c in zip(self.boxes, self.texts, self.confidences)]}


class ResponseCache:
    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(image_path, engine_id):
        h = hashlib.sha256(Path(image_path).read_bytes())
        h.update(b"\0" + engine_id.encode())
        return h.hexdigest()

    def get(self, key):
        p = self.directory / f"{key}.json"
        if p.is_file():
            return json.loads(p.read_text())
        return None

    def put(self, key, doc):
        p = self.directory / f"{key}.json"
        tmp = p.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, sort_keys=True))
        os.replace(tmp, p)


class CommandOcr:
    """Runs an external OCR command once per image, consulting the cache first."""

    def __init__(self, command, cache_dir=None, timeout=120.0, engine_id=None):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise DataError("empty OCR command")
        self.engine_id = engine_id or " ".join(self.argv)
        cache_dir = cache_dir or os.environ.get(CACHE_ENV)
        self.cache = ResponseCache(cache_dir) if cache_dir else None
        self.timeout = timeout

    def recognize(self, image_path):
        key = None
        if self.cache is not None:
            key = ResponseCache.key(image_path, self.engine_id)
            doc = self.cache.get(key)
            if doc is not None:
                return OcrResult.from_json(doc)
        try:
            proc = subprocess.run(self.argv + [str(image_path)], capture_output=True, text=True,
                                  timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise OcrError(f"OCR command failed to run: {e}") from e
        if proc.returncode != 0:
            raise OcrError(f"OCR exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        try:
            doc = json.loads(proc.stdout)
        except json.JSONDecodeError as e:
            raise OcrError(f"OCR output is not JSON: {e}") from e
        result = OcrResult.from_json(doc)
        if self.cache is not None:
            self.cache.put(key, result.to_json())
        return result


class CachedOnlyOcr:
    """Replays a recorded cache and fails on any miss, so runs are reproducible without the engine."""

    def __init__(self, cache_dir, engine_id):
        self.cache = ResponseCache(cache_dir)
        self.engine_id = engine_id

    def recognize(self, image_path):
        doc = self.cache.get(ResponseCache.key(image_path, self.engine_id))
        if doc is None:
            raise OcrError(f"no cached OCR response for {image_path}")
        return OcrResult.from_json(doc)


class CallableOcr:
    """Wraps ``fn(image_path) -> OcrResult`` (mocks, in-process engines)."""

    def __init__(self, fn, engine_id="callable"):
        self.fn = fn
        self.engine_id = engine_id

    def recognize(self, image_path):
        try:
            return self.fn(image_path)
        except OcrError:
            raise
        except Exception as e:
            raise OcrError(str(e)) from e
