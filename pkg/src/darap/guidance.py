"""Out-of-process gradient sources over newline-delimited JSON on stdin/stdout.

Engine to guidance::

    {"type": "init", "vertices": [[x, y, z], ...], "faces": [[i, j, k], ...], "meta": {...}}
    {"type": "step", "epoch": n, "vertices": [[x, y, z], ...]}
    {"type": "close"}

Guidance to engine, once per step::

    {"type": "grad", "epoch": n, "loss": f, "grad": [[gx, gy, gz], ...]}
"""

from __future__ import annotations

import json
import math
import queue
import shlex
import subprocess
import threading
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import GuidanceError
from .mesh import Mesh
from .style import GuidanceSource

DEFAULT_TIMEOUT = 120.0
_EOF = object()


def encode(message: dict) -> str:
    # allow_nan=False keeps the wire strictly finite from our side
    return json.dumps(message, allow_nan=False, separators=(",", ":")) + "\n"


def decode_grad(line: str, epoch: int, n_vertices: int, name: str):
    """Parse and check one ``grad`` reply."""
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise GuidanceError(f"malformed message: {exc}", epoch, name) from None
    if not isinstance(msg, dict) or msg.get("type") != "grad":
        kind = msg.get("type") if isinstance(msg, dict) else type(msg).__name__
        raise GuidanceError(f"unexpected message type {kind!r}", epoch, name)
    if msg.get("epoch") != epoch:
        raise GuidanceError(f"reply is for epoch {msg.get('epoch')!r}", epoch, name)
    loss = msg.get("loss")
    if not isinstance(loss, (int, float)) or isinstance(loss, bool) or not math.isfinite(loss):
        raise GuidanceError(f"loss must be a finite number, got {loss!r}", epoch, name)
    try:
        grad = np.asarray(msg.get("grad"), dtype=np.float64)
    except (TypeError, ValueError):
        raise GuidanceError("gradient is not a numeric array", epoch, name) from None
    if grad.shape != (n_vertices, 3):
        raise GuidanceError(f"gradient has shape {grad.shape}, expected ({n_vertices}, 3)", epoch, name)
    if not np.all(np.isfinite(grad)):
        raise GuidanceError("gradient contains non-finite values", epoch, name)
    return float(loss), grad


class ExternalGuidance(GuidanceSource):
    """A child process speaking the guidance protocol."""

    def __init__(
        self,
        command: Union[str, Sequence[str]],
        name: str = "external",
        timeout: float = DEFAULT_TIMEOUT,
    ):
        self.argv: List[str] = shlex.split(command) if isinstance(command, str) else list(command)
        self.name = name
        self.timeout = timeout
        self.proc: Optional[subprocess.Popen] = None
        self._lines: "queue.Queue" = queue.Queue()
        self._n = 0

    def _reader(self):
        for line in self.proc.stdout:
            if line.strip():
                self._lines.put(line)
        self._lines.put(_EOF)

    def _send(self, message: dict, epoch=None):
        try:
            self.proc.stdin.write(encode(message))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            raise GuidanceError(f"cannot write to guidance process: {exc}", epoch, self.name) from None

    def start(self, mesh: Mesh, meta: dict) -> None:
        try:
            self.proc = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise GuidanceError(f"cannot spawn {self.argv!r}: {exc}", None, self.name) from None
        threading.Thread(target=self._reader, daemon=True).start()
        self._n = mesh.n_vertices
        self._send(
            {
                "type": "init",
                "vertices": mesh.vertices.tolist(),
                "faces": mesh.faces.tolist(),
                "meta": dict(meta),
            }
        )

    def __call__(self, epoch, vertices):
        if self.proc is None:
            raise GuidanceError("source used before start()", epoch, self.name)
        self._send({"type": "step", "epoch": int(epoch), "vertices": np.asarray(vertices).tolist()}, epoch)
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise GuidanceError(f"no reply within {self.timeout:g} s", epoch, self.name) from None
        if line is _EOF:
            code = self.proc.poll()
            raise GuidanceError(f"guidance process exited (status {code})", epoch, self.name)
        return decode_grad(line, int(epoch), self._n, self.name)

    def close(self) -> None:
        if self.proc is None:
            return
        try:
            if self.proc.poll() is None:
                self._send({"type": "close"})
                self.proc.stdin.close()
                self.proc.wait(timeout=5.0)
        except (GuidanceError, subprocess.TimeoutExpired, OSError):
            pass
        finally:
            if self.proc.poll() is None:
                self.proc.kill()
                self.proc.wait()
            self.proc = None


def external_guidance(command, name: str = "external", timeout: float = DEFAULT_TIMEOUT) -> ExternalGuidance:
    return ExternalGuidance(command, name=name, timeout=timeout)
