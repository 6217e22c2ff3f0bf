"""HTTP service: endpoint contracts, error mapping, base64 round trips."""

import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from progpcc.geometry import PointCloud, parse_ply, serialize_ply
from progpcc.service import create_app

BASE_CURVE = [
    {"level": 1, "bpp": 0.5, "d1_psnr": 30.0},
    {"level": 2, "bpp": 1.0, "d1_psnr": 34.0},
    {"level": 3, "bpp": 2.0, "d1_psnr": 37.0},
    {"level": 4, "bpp": 4.0, "d1_psnr": 39.5},
    {"level": 5, "bpp": 8.0, "d1_psnr": 41.0},
]


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode()


@pytest.fixture(scope="module")
def fresh_client():
    with TestClient(create_app()) as client:
        yield client


@pytest.fixture(scope="module")
def client(trained_checkpoint):
    with TestClient(create_app()) as client:
        resp = client.post("/model/load", json={"path": trained_checkpoint})
        assert resp.status_code == 200
        yield client


@pytest.fixture(scope="module")
def ply_payload(sample_points):
    return b64(serialize_ply(PointCloud(sample_points)))


@pytest.fixture(scope="module")
def encoded(client, ply_payload):
    resp = client.post("/encode", json={"ply_b64": ply_payload, "bit_depth": 5})
    assert resp.status_code == 200
    return resp.json()


def test_health(fresh_client):
    body = fresh_client.get("/health").json()
    assert body["status"] == "ok"
    assert body["version"]


def test_model_info_reflects_load_state(fresh_client, trained_checkpoint):
    assert fresh_client.get("/model").json()["loaded"] is False
    resp = fresh_client.post("/model/load", json={"path": trained_checkpoint})
    info = resp.json()
    assert info["loaded"] is True
    assert info["n_levels"] == 6
    assert info["groups"] == "4,4/2,2,4/8"
    assert len(info["param_hash"]) == 16
    assert fresh_client.get("/model").json()["loaded"] is True


def test_data_endpoints_conflict_without_model(ply_payload):
    with TestClient(create_app()) as client:
        resp = client.post("/encode", json={"ply_b64": ply_payload})
        assert resp.status_code == 409


def test_load_missing_checkpoint_404(fresh_client, tmp_path):
    resp = fresh_client.post("/model/load",
                             json={"path": str(tmp_path / "nope.ckpt")})
    assert resp.status_code == 404


def test_load_corrupt_checkpoint_400(fresh_client, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"this is not a checkpoint")
    resp = fresh_client.post("/model/load", json={"path": str(bad)})
    assert resp.status_code == 400


def test_encode_response_shape(encoded, sample_points):
    assert encoded["n_input"] == len(sample_points)
    assert encoded["n_voxels"] > 0
    assert encoded["bpp"] > 0
    assert len(encoded["segment_bytes"]) == 6
    assert len(encoded["segment_bits_estimate"]) == 6
    assert base64.b64decode(encoded["container_b64"])


def test_decode_round_trip(client, encoded):
    resp = client.post("/decode", json={
        "container_b64": encoded["container_b64"], "level": 3})
    assert resp.status_code == 200
    body = resp.json()
    cloud = parse_ply(base64.b64decode(body["ply_b64"]))
    assert len(cloud.points) == body["n_points"]
    assert body["level"] == 3
    assert body["bit_depth"] == 5


def test_truncate_then_decode(client, encoded):
    resp = client.post("/truncate", json={
        "container_b64": encoded["container_b64"], "level": 2})
    assert resp.status_code == 200
    body = resp.json()
    assert body["n_segments"] == 2
    ok = client.post("/decode", json={
        "container_b64": body["container_b64"], "level": 2})
    assert ok.status_code == 200
    over = client.post("/decode", json={
        "container_b64": body["container_b64"], "level": 3})
    assert over.status_code == 400


def test_decode_level_out_of_range_400(client, encoded):
    resp = client.post("/decode", json={
        "container_b64": encoded["container_b64"], "level": 9})
    assert resp.status_code == 400
    assert "level" in resp.json()["detail"]


def test_bad_base64_400(client):
    resp = client.post("/decode", json={"container_b64": "!!!", "level": 1})
    assert resp.status_code == 400


def test_corrupt_container_400(client):
    resp = client.post("/decode", json={
        "container_b64": b64(b"not a container"), "level": 1})
    assert resp.status_code == 400


def test_evaluate_full_curve(client, ply_payload):
    resp = client.post("/evaluate", json={
        "ply_b64": ply_payload, "bit_depth": 5})
    assert resp.status_code == 200
    body = resp.json()
    assert [p["level"] for p in body["points"]] == [1, 2, 3, 4, 5, 6]
    assert body["errors"] == {}
    assert body["csv"].startswith("level,bpp,d1_psnr,d2_psnr")
    bpps = [p["bpp"] for p in body["points"]]
    assert bpps == sorted(bpps)


def test_evaluate_reports_per_level_errors(client, ply_payload):
    resp = client.post("/evaluate", json={
        "ply_b64": ply_payload, "bit_depth": 5, "levels": [1, 50]})
    body = resp.json()
    assert [p["level"] for p in body["points"]] == [1]
    assert list(body["errors"]) == ["50"]


def test_metrics_identical_clouds_have_null_psnr(fresh_client, ply_payload):
    resp = fresh_client.post("/metrics", json={
        "ref_ply_b64": ply_payload, "deg_ply_b64": ply_payload,
        "bit_depth": 5})
    body = resp.json()
    assert body["d1_psnr"] is None  # infinite, transported as null
    assert body["d2_psnr"] is None


def test_metrics_different_clouds(fresh_client, sample_points):
    ref = b64(serialize_ply(PointCloud(sample_points)))
    rng = np.random.default_rng(0)
    deg = b64(serialize_ply(PointCloud(
        sample_points + rng.normal(0, 2.0, sample_points.shape))))
    body = fresh_client.post("/metrics", json={
        "ref_ply_b64": ref, "deg_ply_b64": deg, "bit_depth": 5}).json()
    assert body["d1_psnr"] is not None and body["d1_psnr"] > 0
    assert body["d2_psnr"] is not None and body["d2_psnr"] >= body["d1_psnr"]


def test_bdrate_identical_curves(fresh_client):
    body = fresh_client.post("/bdrate", json={
        "curve_a": BASE_CURVE, "curve_b": BASE_CURVE}).json()
    assert body["defined"] is True
    assert abs(body["bd_rate_percent"]) < 1e-6
    assert abs(body["bd_psnr_db"]) < 1e-9


def test_bdrate_disjoint_curves_undefined(fresh_client):
    lifted = [dict(p, d1_psnr=p["d1_psnr"] + 50) for p in BASE_CURVE]
    body = fresh_client.post("/bdrate", json={
        "curve_a": BASE_CURVE, "curve_b": lifted}).json()
    assert body["defined"] is False
    assert body["bd_rate_percent"] is None


def test_bdrate_too_few_points_400(fresh_client):
    body = fresh_client.post("/bdrate", json={
        "curve_a": BASE_CURVE[:2], "curve_b": BASE_CURVE})
    assert body.status_code == 400
