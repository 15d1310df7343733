"""Newline-delimited JSON protocol for out-of-process evaluators.

Request::

    {"id": 7, "design": {"format": "design/v1", ...}, "freqs": [2e11, ...]}

Response::

    {"id": 7, "s21": [[re, im], ...]}

One object per line; responses may come back in any order. A server may
answer ``{"id": 7, "error": "..."}`` for a request it cannot evaluate.
Endpoints are ``exec:<command line>`` (a child process speaking on its
standard streams) or ``tcp:<host>:<port>``.

Running this module starts a loopback server around the built-in surrogate::

    python -m resinv.external            # stdio
    python -m resinv.external --tcp 127.0.0.1:9000
"""
from __future__ import annotations

import argparse
import json
import logging
import queue
import shlex
import socket
import socketserver
import subprocess
import sys
import threading
from typing import IO, Sequence

import numpy as np

from .evaluator import EvaluationError, SurrogateConfig, TransferFunction, surrogate_eval
from .geometry import CircuitDesign, DesignArrays
from .io import FormatError, design_from_dict, design_to_dict, dumps

log = logging.getLogger(__name__)


class EndpointError(EvaluationError):
    """The evaluator endpoint could not be reached or died."""


class ItemError(EvaluationError):
    """Failure attached to one design of a batch."""

    def __init__(self, index: int, message: str):
        super().__init__(f"item {index}: {message}")
        self.index = index


class EvaluatorTimeout(ItemError):
    pass


class MalformedResponse(ItemError):
    pass


class ResponseValidationError(ItemError):
    def __init__(self, index: int, field: str, message: str):
        super().__init__(index, f"field {field!r}: {message}")
        self.field = field


class GridMismatch(ItemError):
    pass


class RemoteError(ItemError):
    pass


def encode_request(req_id: int, design: CircuitDesign, freqs) -> str:
    return dumps({"id": int(req_id), "design": design_to_dict(design),
                  "freqs": np.asarray(freqs, dtype=float)})


def parse_response(line: str) -> dict:
    """Decode one response line; raises ``ValueError`` subclasses on bad input.

    Returns ``{"id": int, "s21": ndarray}`` or ``{"id": int, "error": str}``.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise _Undecodable(f"malformed JSON line ({exc.msg})") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("id"), int):
        raise _Undecodable("response without an integer 'id'")
    if "error" in obj:
        return {"id": obj["id"], "error": str(obj["error"])}
    if "s21" not in obj:
        raise _BadField(obj["id"], "s21", "missing")
    try:
        pairs = np.asarray(obj["s21"], dtype=float)
    except (TypeError, ValueError):
        raise _BadField(obj["id"], "s21", "not a list of [re, im] pairs") from None
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise _BadField(obj["id"], "s21", "not a list of [re, im] pairs")
    return {"id": obj["id"], "s21": pairs[:, 0] + 1j * pairs[:, 1]}


class _Undecodable(ValueError):
    pass


class _BadField(ValueError):
    def __init__(self, req_id, field, message):
        super().__init__(message)
        self.req_id, self.field = req_id, field


# --- transport ----------------------------------------------------------------------

class Connection:
    """Line-oriented duplex stream with a background reader."""

    def __init__(self, reader: IO[str], writer: IO[str], closer=None):
        self._writer = writer
        self._closer = closer
        self.lines: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._pump, args=(reader,), daemon=True)
        self._thread.start()

    def _pump(self, reader):
        try:
            for line in reader:
                self.lines.put(line)
        except (OSError, ValueError):
            pass
        self.lines.put(None)

    def send(self, line: str) -> None:
        try:
            self._writer.write(line + "\n")
            self._writer.flush()
        except (OSError, ValueError) as exc:
            raise EndpointError(f"evaluator endpoint closed: {exc}") from exc

    def close(self) -> None:
        if self._closer is not None:
            self._closer()
            self._closer = None


def connect(endpoint: str, timeout: float = 10.0) -> Connection:
    kind, _, rest = endpoint.partition(":")
    if kind == "exec" and rest:
        try:
            proc = subprocess.Popen(shlex.split(rest), stdin=subprocess.PIPE,
                                    stdout=subprocess.PIPE, text=True, bufsize=1)
        except OSError as exc:
            raise EndpointError(f"cannot start evaluator {rest!r}: {exc}") from exc

        def close():
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
            proc.stdout.close()
        return Connection(proc.stdout, proc.stdin, close)
    if kind == "tcp" and rest:
        host, _, port = rest.rpartition(":")
        try:
            sock = socket.create_connection((host, int(port)), timeout=timeout)
        except (OSError, ValueError) as exc:
            raise EndpointError(f"cannot reach evaluator at {rest!r}: {exc}") from exc
        sock.settimeout(None)
        rfile = sock.makefile("r", encoding="utf-8")
        wfile = sock.makefile("w", encoding="utf-8")

        def close():
            try:
                wfile.close()
                # wakes the reader thread, which holds rfile's lock while blocked
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            rfile.close()
            sock.close()
        return Connection(rfile, wfile, close)
    raise ValueError(f"unknown evaluator endpoint {endpoint!r}; "
                     "expected exec:<command> or tcp:<host>:<port>")


# --- client -------------------------------------------------------------------------

class ExternalClient:
    """Evaluates design batches over one persistent connection."""

    def __init__(self, endpoint: str, max_in_flight: int = 8, timeout: float = 30.0):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.endpoint = endpoint
        self.max_in_flight = max_in_flight
        self.timeout = timeout
        self._conn: Connection | None = None
        self._next_id = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def evaluate(self, designs: Sequence[CircuitDesign], freqs) -> list:
        """Return one ``TransferFunction`` or ``ItemError`` per design, in input order."""
        freqs = np.asarray(freqs, dtype=float)
        if self._conn is None:
            self._conn = connect(self.endpoint)
        conn = self._conn
        results: list = [None] * len(designs)
        ids = {}
        pending_send = list(range(len(designs)))
        in_flight = 0
        unattributed: list[str] = []

        def send_more():
            nonlocal in_flight
            while pending_send and in_flight < self.max_in_flight:
                k = pending_send.pop(0)
                req_id = self._next_id
                self._next_id += 1
                ids[req_id] = k
                conn.send(encode_request(req_id, designs[k], freqs))
                in_flight += 1

        send_more()
        while in_flight:
            try:
                line = conn.lines.get(timeout=self.timeout)
            except queue.Empty:
                break
            if line is None:
                self.close()
                raise EndpointError(f"evaluator {self.endpoint!r} closed the connection")
            if not line.strip():
                continue
            try:
                resp = parse_response(line)
            except _Undecodable as exc:
                unattributed.append(str(exc))
                in_flight -= 1
                send_more()
                continue
            except _BadField as exc:
                k = ids.pop(exc.req_id, None)
                if k is not None:
                    results[k] = ResponseValidationError(k, exc.field, str(exc))
                    in_flight -= 1
                    send_more()
                continue
            k = ids.pop(resp["id"], None)
            if k is None:
                log.debug("ignoring response for unknown id %s", resp["id"])
                continue
            in_flight -= 1
            if "error" in resp:
                results[k] = RemoteError(k, resp["error"])
            elif resp["s21"].shape != freqs.shape:
                results[k] = GridMismatch(
                    k, f"s21 has {resp['s21'].size} points, grid has {freqs.size}")
            else:
                results[k] = TransferFunction(freqs, resp["s21"])
            send_more()

        timed_out = bool(in_flight)
        for req_id, k in list(ids.items()):
            if timed_out and not unattributed:
                results[k] = EvaluatorTimeout(k, f"no response within {self.timeout} s")
            else:
                msg = unattributed.pop(0) if unattributed else "no valid response"
                results[k] = MalformedResponse(k, msg)
            ids.pop(req_id)
        for k in pending_send:
            results[k] = EvaluatorTimeout(k, "not sent before the evaluator timed out")
        return results


def external_eval(designs: Sequence[CircuitDesign], freqs, endpoint: str,
                  max_in_flight: int = 8, timeout: float = 30.0) -> list:
    with ExternalClient(endpoint, max_in_flight, timeout) as client:
        return client.evaluate(designs, freqs)


class ExternalEvaluator:
    """Trainer-facing adapter: magnitudes with NaN rows for failed items."""

    def __init__(self, endpoint: str, max_in_flight: int = 8, timeout: float = 30.0,
                 geometry=None):
        self.client = ExternalClient(endpoint, max_in_flight, timeout)
        self.geometry = geometry

    def __call__(self, designs: DesignArrays, freqs) -> np.ndarray:
        g = self.geometry
        items = [designs.design(k) if g is None else
                 designs.design(k, g.g_min_ratio, g.g_max_ratio, g.n_budget)
                 for k in range(len(designs))]
        out = np.full((len(items), len(freqs)), np.nan)
        for k, res in enumerate(self.client.evaluate(items, freqs)):
            if isinstance(res, TransferFunction):
                out[k] = np.abs(res.s21)
            else:
                log.warning("external evaluation failed: %s", res)
        return out

    def close(self):
        self.client.close()


# --- loopback server ----------------------------------------------------------------

def handle_request(line: str, cfg: SurrogateConfig) -> str:
    req_id = None
    try:
        req = json.loads(line)
        req_id = req.get("id") if isinstance(req, dict) else None
        if not isinstance(req_id, int):
            raise ValueError("request without an integer 'id'")
        design = design_from_dict(req["design"])
        tf = surrogate_eval(design, cfg, np.asarray(req["freqs"], dtype=float))
        pairs = np.stack([tf.s21.real, tf.s21.imag], axis=-1)
        return dumps({"id": req_id, "s21": pairs})
    except (ValueError, KeyError, TypeError, FormatError, EvaluationError) as exc:
        return dumps({"id": req_id, "error": f"{type(exc).__name__}: {exc}"})


def serve(reader: IO[str], writer: IO[str], cfg: SurrogateConfig | None = None) -> None:
    cfg = cfg or SurrogateConfig()
    for line in reader:
        if line.strip():
            writer.write(handle_request(line, cfg) + "\n")
            writer.flush()


def make_tcp_server(host: str, port: int, cfg: SurrogateConfig | None = None):
    """A threaded TCP server; call ``serve_forever`` (``port=0`` picks a free port)."""
    cfg = cfg or SurrogateConfig()

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            for raw in self.rfile:
                line = raw.decode("utf-8")
                if line.strip():
                    self.wfile.write((handle_request(line, cfg) + "\n").encode("utf-8"))
                    self.wfile.flush()

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    return Server((host, port), Handler)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="Loopback evaluator around the built-in surrogate.")
    p.add_argument("--tcp", metavar="HOST:PORT", help="listen on a TCP socket instead of stdio")
    p.add_argument("--config", help="run config whose surrogate section is used")
    args = p.parse_args(argv)
    cfg = SurrogateConfig()
    if args.config:
        from .config import load_config
        cfg = load_config(args.config).surrogate
    if args.tcp:
        host, _, port = args.tcp.rpartition(":")
        with make_tcp_server(host or "127.0.0.1", int(port), cfg) as server:
            server.serve_forever()
    else:
        serve(sys.stdin, sys.stdout, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
