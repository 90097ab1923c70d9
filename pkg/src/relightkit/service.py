"""Interactive editing service: relighting and latent-edit sessions over HTTP.

JSON API under /api/v1; PNG renders; optional static UI dir served at /.
Edits within one session are serialized by a per-session lock; separate
sessions run concurrently on the threading server.
"""

from __future__ import annotations

import base64
import json
import mimetypes
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from . import envmap as em
from . import latent as lt
from . import olat
from . import training as tr
from .radiometry import HdrImage, read_radiance_hdr, tonemap, write_png


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


_EDIT_FIELDS = {"env_id", "env_yaw", "yaw", "pitch", "roll", "exposure", "p", "q",
                "env_hdr_b64"}


class Session:
    def __init__(self, sid: str, kind: str):
        self.id = sid
        self.kind = kind  # "olat" | "latent"
        self.lock = threading.Lock()
        self.stack = None
        self.latent = None
        self.uploaded_env = None
        self.state = {
            "env_id": None,
            "env_yaw": 0.0,
            "yaw": 0.0,
            "pitch": 0.0,
            "roll": 0.0,
            "exposure": 1.0,
            "p": 0,
            "q": 0,
        }
        self.rev = 0
        self.last_png = None
        self.last_timing_ms = 0.0


class EditingService:
    """Session store plus the render pipeline; HTTP-agnostic core."""

    def __init__(self, checkpoint_path=None, manifest_path=None):
        self.generator = None
        self.params = None
        self.env_normalization = "none"
        if checkpoint_path:
            data = Path(checkpoint_path).read_bytes()
            self.params, _, tcfg, gen_info = tr.load_checkpoint(data)
            self.generator = lt.ToyGenerator(
                seed=int(gen_info.get("seed", 0)),
                image_size=int(gen_info.get("image_size", 64)),
            )
            self.env_normalization = tcfg.env_normalization
        self.manifest = olat.load_manifest(manifest_path) if manifest_path else None
        if self.manifest:
            self.basis = em.load_basis(
                (self.manifest.root / self.manifest.basis_file).read_text()
            )
        else:
            self.basis = em.fibonacci_basis(olat.N_LIGHTS)
        self._envs: dict = {}
        self._sessions: dict = {}
        self._sessions_lock = threading.Lock()
        # warm the JIT so the first edit is not paying compile time
        dummy = np.zeros((olat.N_LIGHTS, 4, 3), np.float32)
        from ._kernels import accumulate_weighted

        accumulate_weighted(dummy, np.zeros((olat.N_LIGHTS, 3)), np.empty((4, 3), np.float32))

    # --- env catalog ---------------------------------------------------------

    def env_ids(self) -> list:
        return self.manifest.env_ids() if self.manifest else []

    def envmap(self, env_id: str) -> em.LatLongEnvMap:
        if env_id not in self._envs:
            if not self.manifest:
                raise ApiError(400, f"unknown env map {env_id!r} (no manifest loaded)")
            try:
                path = self.manifest.envmap_path(env_id)
            except KeyError:
                raise ApiError(400, f"unknown env map {env_id!r}")
            self._envs[env_id] = em.LatLongEnvMap(read_radiance_hdr(path.read_bytes()))
        return self._envs[env_id]

    def env_thumb_png(self, env_id: str) -> bytes:
        env = self.envmap(env_id)
        px = env.pixels
        sy = max(1, px.shape[0] // 32)
        sx = max(1, px.shape[1] // 64)
        small = HdrImage(px[::sy, ::sx])
        return write_png(tonemap(small, exposure=1.0, gamma=2.2))

    # --- sessions ------------------------------------------------------------

    def create_session(self, spec: dict) -> Session:
        if not isinstance(spec, dict):
            raise ApiError(400, "session spec must be a JSON object")
        keys = {"stack_dir", "identity", "camera", "latent_path", "image_b64"}
        unknown = set(spec) - keys
        if unknown:
            raise ApiError(400, f"unknown session fields: {sorted(unknown)}")
        sid = uuid.uuid4().hex
        if "stack_dir" in spec:
            session = Session(sid, "olat")
            session.stack = olat.load_stack(spec["stack_dir"])
        elif "identity" in spec or "camera" in spec:
            if not self.manifest:
                raise ApiError(400, "identity/camera sessions need a manifest")
            try:
                cam = self.manifest.camera(spec.get("identity"), spec.get("camera"))
            except KeyError:
                raise ApiError(400, "unknown identity/camera")
            session = Session(sid, "olat")
            session.stack = olat.load_stack(
                self.manifest.root / cam.olat_dir,
                spec.get("identity"), spec.get("camera"), cam.pose,
            )
        elif "latent_path" in spec:
            if self.generator is None or self.params is None:
                raise ApiError(422, "latent sessions need a checkpoint")
            session = Session(sid, "latent")
            session.latent = np.load(spec["latent_path"]).astype(np.float32)
        elif "image_b64" in spec:
            if self.generator is None or not self.generator.has_encoder:
                raise ApiError(422, "image sessions need an encoder-capable generator")
            if self.params is None:
                raise ApiError(422, "image sessions need a checkpoint")
            hdr = read_radiance_hdr(base64.b64decode(spec["image_b64"]))
            session = Session(sid, "latent")
            session.latent = self.generator.encode(olat.auto_exposure_ldr(hdr))
        else:
            raise ApiError(400, "session spec needs stack_dir, identity/camera, "
                                "latent_path or image_b64")
        ids = self.env_ids()
        session.state["env_id"] = ids[0] if ids else None
        if session.kind == "olat" and session.stack.pose is not None:
            session.state["yaw"] = session.stack.pose.yaw
            session.state["pitch"] = session.stack.pose.pitch
            session.state["roll"] = session.stack.pose.roll
        self._render(session)  # initial render before the session is visible
        with self._sessions_lock:
            self._sessions[sid] = session
        return session

    def session(self, sid: str) -> Session:
        with self._sessions_lock:
            if sid not in self._sessions:
                raise ApiError(404, f"unknown session {sid!r}")
            return self._sessions[sid]

    def edit(self, sid: str, delta: dict) -> Session:
        session = self.session(sid)
        if not isinstance(delta, dict):
            raise ApiError(400, "edit delta must be a JSON object")
        unknown = set(delta) - _EDIT_FIELDS
        if unknown:
            raise ApiError(400, f"unknown edit fields: {sorted(unknown)}")
        with session.lock:
            if "env_hdr_b64" in delta:
                data = base64.b64decode(delta.pop("env_hdr_b64"))
                session.uploaded_env = em.LatLongEnvMap(read_radiance_hdr(data))
                session.state["env_id"] = None
            for key, value in delta.items():
                if key in ("p", "q"):
                    if value not in (0, 1):
                        raise ApiError(400, f"{key} must be 0 or 1")
                    session.state[key] = int(value)
                elif key == "env_id":
                    self.envmap(value)  # validates the id
                    session.state["env_id"] = value
                    session.uploaded_env = None
                else:
                    try:
                        session.state[key] = float(value)
                    except (TypeError, ValueError):
                        raise ApiError(400, f"{key} must be a number")
            if session.state["exposure"] <= 0:
                raise ApiError(400, "exposure must be positive")
            self._render(session)
        return session

    def _current_env(self, session: Session):
        if session.uploaded_env is not None:
            return session.uploaded_env
        if session.state["env_id"] is not None:
            return self.envmap(session.state["env_id"])
        return em.constant_env(1.0, 32, 16)

    def _render(self, session: Session) -> None:
        t0 = time.perf_counter()
        st = session.state
        env = self._current_env(session)
        if st["env_yaw"]:
            env = em.rotate_env(env, st["env_yaw"])
        weights = em.resample_to_basis(env, self.basis)
        if session.kind == "olat":
            hdr = olat.relight(session.stack, weights)
            png = write_png(tonemap(hdr, st["exposure"], 2.2), compress_level=3)
        else:
            vec = weights.vector()
            if self.env_normalization == "unit_energy" and vec.sum() > 0:
                vec = vec / vec.sum()
            cond = lt.ConditionVector(
                env=vec,
                pose=olat.CameraPose(st["yaw"], st["pitch"], st["roll"]),
                p=st["p"],
                q=st["q"] if self.params.config.use_q else None,
            )
            out, _ = lt.forward(self.params, session.latent, cond)
            img = np.clip(self.generator.decode_array(out), 0.0, 1.0)
            png = write_png(tonemap(img, st["exposure"], 1.0), compress_level=3)
        session.last_png = png
        session.rev += 1
        session.last_timing_ms = (time.perf_counter() - t0) * 1e3


# --- HTTP layer ---------------------------------------------------------------


def _session_payload(session: Session) -> dict:
    return {
        "session_id": session.id,
        "render_url": f"/api/v1/sessions/{session.id}/image?rev={session.rev}",
        "timing_ms": session.last_timing_ms,
        "rev": session.rev,
        "state": dict(session.state),
        "kind": session.kind,
    }


class _Handler(BaseHTTPRequestHandler):
    service: EditingService = None
    ui_dir: Path = None

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send_json(self, obj, status=200):
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_bytes(self, data: bytes, ctype: str, status=200):
        self.send_response(status)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Cache-Control", "no-store")
        self.end_headers()
        self.wfile.write(data)

    def _read_json(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            return json.loads(raw or b"{}")
        except json.JSONDecodeError:
            raise ApiError(400, "request body is not valid JSON")

    def _route(self, method: str):
        path = self.path.split("?", 1)[0].rstrip("/") or "/"
        parts = [p for p in path.split("/") if p]
        try:
            if parts[:2] == ["api", "v1"]:
                return self._api(method, parts[2:])
            if method == "GET" and path in ("/healthz",):
                return self._send_bytes(b"ok", "text/plain")
            if method == "GET" and self.ui_dir:
                return self._static(parts)
            raise ApiError(404, f"no route for {self.path}")
        except ApiError as exc:
            self._send_json({"error": str(exc)}, exc.status)
        except (FileNotFoundError, KeyError) as exc:
            self._send_json({"error": str(exc)}, 404)
        except Exception as exc:  # keep the server alive
            self._send_json({"error": f"internal: {exc}"}, 500)

    def _api(self, method: str, parts: list):
        svc = self.service
        if method == "GET" and parts == ["healthz"]:
            return self._send_bytes(b"ok", "text/plain")
        if method == "GET" and parts == ["envmaps"]:
            return self._send_json({"envmaps": [{"id": i} for i in svc.env_ids()]})
        if method == "GET" and len(parts) == 3 and parts[0] == "envmaps" \
                and parts[2] == "thumb.png":
            return self._send_bytes(svc.env_thumb_png(parts[1]), "image/png")
        if method == "POST" and parts == ["sessions"]:
            session = svc.create_session(self._read_json())
            return self._send_json(_session_payload(session), 201)
        if len(parts) >= 2 and parts[0] == "sessions":
            sid = parts[1]
            if method == "POST" and parts[2:] == ["edit"]:
                session = svc.edit(sid, self._read_json())
                return self._send_json(_session_payload(session))
            if method == "GET" and parts[2:] == ["image"]:
                session = svc.session(sid)
                with session.lock:
                    png = session.last_png
                return self._send_bytes(png, "image/png")
            if method == "GET" and parts[2:] == []:
                return self._send_json(_session_payload(svc.session(sid)))
        raise ApiError(404, f"no API route for {self.path}")

    def _static(self, parts: list):
        rel = "/".join(parts) or "index.html"
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())):
            raise ApiError(404, "outside static root")
        if target.is_dir():
            target = target / "index.html"
        if not target.is_file():
            raise ApiError(404, f"no such file: {rel}")
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self._send_bytes(target.read_bytes(), ctype)

    def do_GET(self):
        self._route("GET")

    def do_POST(self):
        self._route("POST")


def make_server(service: EditingService, port: int = 0, ui_dir=None) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {
        "service": service,
        "ui_dir": Path(ui_dir) if ui_dir else None,
    })
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    server.daemon_threads = True
    return server


def run_server(checkpoint=None, manifest=None, port: int = 8321, ui_dir=None):
    service = EditingService(checkpoint, manifest)
    server = make_server(service, port, ui_dir)
    host, bound_port = server.server_address
    print(f"serving on http://{host}:{bound_port}/ (api under /api/v1)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
