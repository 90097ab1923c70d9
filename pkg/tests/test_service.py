import base64
import io
import json
import threading

import numpy as np
import pytest
import requests
from PIL import Image

from relightkit import envmap as em
from relightkit import latent as lt
from relightkit import olat
from relightkit import training as tr
from relightkit.radiometry import HdrImage, tonemap, write_png, write_radiance_hdr
from relightkit.service import EditingService, make_server


@pytest.fixture(scope="module")
def service_env(tmp_path_factory):
    """Dataset + random-net checkpoint + latent file for service tests."""
    root = tmp_path_factory.mktemp("svc")
    manifest = olat.synth_dataset(root / "ds", seed=31, n_identities=1,
                                  n_cameras=1, n_envmaps=3, resolution=16)
    cfg = lt.EditNetConfig(use_q=True, seed=2)
    params = lt.random_params(cfg, scale=0.02)  # nonzero so pose edits matter
    ckpt = root / "checkpoint.bin"
    ckpt.write_bytes(tr.save_checkpoint(
        params, tr.AdamState.for_params(params), tr.TrainConfig(use_q=True),
        {"seed": 5, "image_size": 64},
    ))
    rng = np.random.default_rng(0)
    latent_file = root / "latent.npy"
    np.save(latent_file, (0.3 * rng.standard_normal((18, 512))).astype(np.float32))
    return manifest, ckpt, latent_file


@pytest.fixture(scope="module")
def server(service_env):
    manifest, ckpt, _ = service_env
    service = EditingService(ckpt, manifest.root / "manifest.json")
    httpd = make_server(service, port=0)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{httpd.server_address[1]}"
    yield base, service, manifest
    httpd.shutdown()


def _stack_dir(manifest):
    return str(manifest.root / manifest.identity("id00").cameras[0].olat_dir)


def test_healthz(server):
    base, _, _ = server
    assert requests.get(f"{base}/api/v1/healthz").text == "ok"
    assert requests.get(f"{base}/healthz").status_code == 200


def test_envmaps_catalog_and_thumbs(server):
    base, _, manifest = server
    r = requests.get(f"{base}/api/v1/envmaps")
    assert r.status_code == 200
    ids = [e["id"] for e in r.json()["envmaps"]]
    assert ids == manifest.env_ids()
    thumb = requests.get(f"{base}/api/v1/envmaps/{ids[0]}/thumb.png")
    assert thumb.status_code == 200
    assert thumb.content[:8] == b"\x89PNG\r\n\x1a\n"


def test_create_olat_session(server):
    base, _, manifest = server
    r = requests.post(f"{base}/api/v1/sessions",
                      json={"stack_dir": _stack_dir(manifest)})
    assert r.status_code == 201
    doc = r.json()
    assert doc["session_id"]
    assert doc["timing_ms"] >= 0
    img = requests.get(f"{base}{doc['render_url']}")
    assert img.status_code == 200
    Image.open(io.BytesIO(img.content)).verify()


def test_sessions_have_distinct_ids(server):
    base, _, manifest = server
    spec = {"stack_dir": _stack_dir(manifest)}
    a = requests.post(f"{base}/api/v1/sessions", json=spec).json()["session_id"]
    b = requests.post(f"{base}/api/v1/sessions", json=spec).json()["session_id"]
    assert a != b


def test_malformed_session_spec(server):
    base, _, _ = server
    assert requests.post(f"{base}/api/v1/sessions", json={}).status_code == 400
    assert requests.post(f"{base}/api/v1/sessions",
                         json={"bogus": 1}).status_code == 400
    r = requests.post(f"{base}/api/v1/sessions", data=b"{not json",
                      headers={"Content-Type": "application/json"})
    assert r.status_code == 400


def test_image_session_without_encoder_422(service_env):
    manifest, _, _ = service_env
    service = EditingService(None, manifest.root / "manifest.json")  # no checkpoint
    httpd = make_server(service, port=0)
    t = threading.Thread(target=httpd.serve_forever, daemon=True)
    t.start()
    try:
        base = f"http://127.0.0.1:{httpd.server_address[1]}"
        payload = base64.b64encode(write_radiance_hdr(
            HdrImage(np.ones((16, 16, 3), np.float32)))).decode()
        r = requests.post(f"{base}/api/v1/sessions", json={"image_b64": payload})
        assert r.status_code == 422
    finally:
        httpd.shutdown()


def test_empty_edit_is_idempotent(server):
    base, _, manifest = server
    sid = requests.post(f"{base}/api/v1/sessions",
                        json={"stack_dir": _stack_dir(manifest)}).json()["session_id"]
    before = requests.get(f"{base}/api/v1/sessions/{sid}/image").content
    r = requests.post(f"{base}/api/v1/sessions/{sid}/edit", json={})
    assert r.status_code == 200
    after = requests.get(f"{base}/api/v1/sessions/{sid}/image").content
    assert before == after


def test_edit_unknown_session_404(server):
    base, _, _ = server
    r = requests.post(f"{base}/api/v1/sessions/deadbeef/edit", json={})
    assert r.status_code == 404


def test_edit_unknown_field_400(server):
    base, _, manifest = server
    sid = requests.post(f"{base}/api/v1/sessions",
                        json={"stack_dir": _stack_dir(manifest)}).json()["session_id"]
    r = requests.post(f"{base}/api/v1/sessions/{sid}/edit", json={"warp": 9})
    assert r.status_code == 400
    r = requests.post(f"{base}/api/v1/sessions/{sid}/edit", json={"p": 3})
    assert r.status_code == 400
    r = requests.post(f"{base}/api/v1/sessions/{sid}/edit", json={"exposure": -1})
    assert r.status_code == 400


def test_olat_indicator_env_serves_single_light(server):
    base, _, manifest = server
    stack_dir = _stack_dir(manifest)
    sid = requests.post(f"{base}/api/v1/sessions",
                        json={"stack_dir": stack_dir}).json()["session_id"]
    basis = em.fibonacci_basis(150)
    w, h = 64, 32
    y, x = 7, 22
    px = np.zeros((h, w, 3), np.float32)
    px[y, x] = 1.0 / em.texel_solid_angles(w, h)[y, x]
    blob = write_radiance_hdr(HdrImage(px))
    payload = base64.b64encode(blob).decode()
    r = requests.post(f"{base}/api/v1/sessions/{sid}/edit",
                      json={"env_hdr_b64": payload, "exposure": 1.0})
    assert r.status_code == 200
    served = requests.get(f"{base}/api/v1/sessions/{sid}/image").content

    # expected: same pipeline composed from library calls, including the
    # RGBE quantization the upload goes through
    from relightkit.radiometry import read_radiance_hdr
    env = em.LatLongEnvMap(read_radiance_hdr(blob))
    hdr_img = olat.relight(olat.load_stack(stack_dir),
                           em.resample_to_basis(env, basis))
    expected = write_png(tonemap(hdr_img, 1.0, 2.2), compress_level=3)
    assert served == expected


def test_latent_session_pose_edit_changes_image(server, service_env):
    base, _, _ = server
    _, _, latent_file = service_env
    r = requests.post(f"{base}/api/v1/sessions",
                      json={"latent_path": str(latent_file)})
    assert r.status_code == 201
    doc = r.json()
    sid = doc["session_id"]
    assert doc["kind"] == "latent"
    img0 = requests.get(f"{base}/api/v1/sessions/{sid}/image").content
    r = requests.post(f"{base}/api/v1/sessions/{sid}/edit",
                      json={"yaw": 0.8, "p": 1})
    assert r.status_code == 200
    img1 = requests.get(f"{base}/api/v1/sessions/{sid}/image").content
    assert img0 != img1  # random net reacts to the pose input


def test_session_isolation(server):
    base, _, manifest = server
    spec = {"stack_dir": _stack_dir(manifest)}
    a = requests.post(f"{base}/api/v1/sessions", json=spec).json()["session_id"]
    b = requests.post(f"{base}/api/v1/sessions", json=spec).json()["session_id"]
    before_b = requests.get(f"{base}/api/v1/sessions/{b}/image").content
    requests.post(f"{base}/api/v1/sessions/{a}/edit", json={"env_yaw": 1.0})
    after_b = requests.get(f"{base}/api/v1/sessions/{b}/image").content
    assert before_b == after_b


def test_concurrent_edits_serialize(server):
    base, service, manifest = server
    sid = requests.post(f"{base}/api/v1/sessions",
                        json={"stack_dir": _stack_dir(manifest)}).json()["session_id"]
    yaws = [0.1 * i for i in range(8)]
    errors = []

    def hit(yaw):
        try:
            r = requests.post(f"{base}/api/v1/sessions/{sid}/edit",
                              json={"env_yaw": yaw})
            assert r.status_code == 200
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=hit, args=(y,)) for y in yaws]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    # final image corresponds to whatever state the session settled in
    state = requests.get(f"{base}/api/v1/sessions/{sid}").json()["state"]
    served = requests.get(f"{base}/api/v1/sessions/{sid}/image").content
    session = service.session(sid)
    env = service._current_env(session)
    env = em.rotate_env(env, state["env_yaw"])
    hdr_img = olat.relight(session.stack, em.resample_to_basis(env, service.basis))
    expected = write_png(tonemap(hdr_img, state["exposure"], 2.2), compress_level=3)
    assert served == expected


def test_timing_reported(server):
    base, _, manifest = server
    sid = requests.post(f"{base}/api/v1/sessions",
                        json={"stack_dir": _stack_dir(manifest)}).json()["session_id"]
    doc = requests.post(f"{base}/api/v1/sessions/{sid}/edit",
                        json={"env_yaw": 0.5}).json()
    assert doc["timing_ms"] >= 0
    assert "render_url" in doc
