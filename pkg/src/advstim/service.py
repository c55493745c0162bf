"""HTTP bridge between the stimulus pool and the browser client.

Serves session manifests and stimulus images, and persists response posts.
Responses are enriched server-side from the stimulus sidecars (condition,
group, true class, target) so the client never needs, and never receives,
any of those labels. Each post is appended to a JSONL log and pushed to
disk before the request is acknowledged; an acked response survives a hard
kill of the process. The first post for a trial is the counted one, later
posts for the same trial are stored with the counted flag cleared.
"""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .analysis import ResponseRecord, append_response, load_responses

__all__ = ["ServiceState", "ExperimentServer", "make_server", "handle_response_post"]

_ID_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9_\-]*\Z")


class ServiceState:
    """Disk-backed request state shared by all handler threads.

    Manifests and sidecars are read per request (they are small and
    immutable once written, and new sessions may appear while the server
    runs). The set of trials that already received their counted response
    is rebuilt from the log on startup, so restarts keep the first-choice
    rule intact.
    """

    def __init__(self, stimuli_dir, sessions_dir, log_path):
        self.stimuli_dir = Path(stimuli_dir)
        self.sessions_dir = Path(sessions_dir)
        self.log_path = Path(log_path)
        self.lock = threading.Lock()
        self.counted_trials: set[str] = set()
        if self.log_path.exists():
            for rec in load_responses(self.log_path):
                if rec.counted:
                    self.counted_trials.add(rec.trial_id)

    def manifest_path(self, session_id: str) -> Path:
        return self.sessions_dir / f"{session_id}.json"

    def stimulus_path(self, stimulus_id: str) -> Path:
        return self.stimuli_dir / "stimuli" / f"{stimulus_id}.png"

    def sidecar_path(self, stimulus_id: str) -> Path:
        return self.stimuli_dir / "stimuli" / f"{stimulus_id}.json"


def _bad(reason: str) -> tuple[int, dict]:
    return 400, {"error": reason}


def handle_response_post(state: ServiceState, body: bytes) -> tuple[int, dict]:
    """Validate, enrich, and durably append one response post.

    Returns (http_status, json_payload). 400 covers malformed bodies,
    409 a trial the server does not know about.
    """
    try:
        payload = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return _bad("body is not valid JSON")
    if not isinstance(payload, dict):
        return _bad("body must be a JSON object")

    for key in ("session_id", "subject_id", "trial_id"):
        if not isinstance(payload.get(key), str) or not payload[key]:
            return _bad(f"missing or invalid {key}")
    session_id = payload["session_id"]
    trial_id = payload["trial_id"]
    if not _ID_RE.match(session_id):
        return _bad("invalid session_id")

    choice = payload.get("choice")
    rt_ms = payload.get("rt_ms")
    if choice is not None and not isinstance(choice, str):
        return _bad("choice must be a string or null")
    if rt_ms is not None and not isinstance(rt_ms, (int, float)):
        return _bad("rt_ms must be a number or null")
    flagged = payload.get("timing_flagged", False)
    if not isinstance(flagged, bool):
        return _bad("timing_flagged must be a boolean")

    manifest_path = state.manifest_path(session_id)
    if not manifest_path.exists():
        return 409, {"error": f"unknown trial {trial_id!r}"}
    manifest = json.loads(manifest_path.read_text())
    trial = next((t for t in manifest["trials"] if t["trial_id"] == trial_id), None)
    if trial is None:
        return 409, {"error": f"unknown trial {trial_id!r}"}
    stimulus_id = trial["stimulus_id"]
    if "stimulus_id" in payload and payload["stimulus_id"] != stimulus_id:
        return _bad("stimulus_id does not match the trial")
    if choice is not None and choice not in manifest["buttons"]:
        return _bad(f"choice {choice!r} is not one of the session buttons")

    meta = json.loads(state.sidecar_path(stimulus_id).read_text())
    with state.lock:
        counted = trial_id not in state.counted_trials
        try:
            record = ResponseRecord(
                session_id=session_id, subject_id=payload["subject_id"],
                trial_id=trial_id, stimulus_id=stimulus_id,
                condition=meta["condition"], group=meta["group"],
                choice=choice, rt_ms=None if rt_ms is None else float(rt_ms),
                counted=counted, true_class=meta.get("true_class"),
                target=meta.get("target"), timing_flagged=flagged)
        except ValueError as e:
            return _bad(str(e))
        append_response(state.log_path, record)
        if counted:
            state.counted_trials.add(trial_id)
    return 200, {"ok": True, "counted": counted}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def state(self) -> ServiceState:
        return self.server.state  # type: ignore[attr-defined]

    def log_message(self, format, *args):
        pass  # request logging stays out of test output; errors surface via status codes

    def _send(self, code: int, content_type: str, payload: bytes) -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def _send_json(self, code: int, obj: dict) -> None:
        self._send(code, "application/json", json.dumps(obj).encode("utf-8"))

    def do_GET(self):
        m = re.fullmatch(r"/session/([^/]+)", self.path)
        if m:
            return self._get_session(m.group(1))
        m = re.fullmatch(r"/stimulus/([^/]+)\.png", self.path)
        if m:
            return self._get_stimulus(m.group(1))
        self._send_json(404, {"error": "no such route"})

    def _get_session(self, session_id: str) -> None:
        if not _ID_RE.match(session_id):
            return self._send_json(404, {"error": "unknown session"})
        path = self.state.manifest_path(session_id)
        if not path.exists():
            return self._send_json(404, {"error": "unknown session"})
        self._send(200, "application/json", path.read_bytes())

    def _get_stimulus(self, stimulus_id: str) -> None:
        if not _ID_RE.match(stimulus_id):
            return self._send_json(404, {"error": "unknown stimulus"})
        path = self.state.stimulus_path(stimulus_id)
        if not path.exists():
            return self._send_json(404, {"error": "unknown stimulus"})
        self._send(200, "image/png", path.read_bytes())

    def do_POST(self):
        if self.path != "/response":
            return self._send_json(404, {"error": "no such route"})
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = 0
        body = self.rfile.read(length)
        code, obj = handle_response_post(self.state, body)
        self._send_json(code, obj)


class ExperimentServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, state: ServiceState):
        super().__init__(address, _Handler)
        self.state = state


def make_server(stimuli_dir, sessions_dir, log_path,
                host: str = "127.0.0.1", port: int = 0) -> ExperimentServer:
    """Bind a server (port 0 picks a free port); call serve_forever() to run."""
    state = ServiceState(stimuli_dir, sessions_dir, log_path)
    return ExperimentServer((host, port), state)
