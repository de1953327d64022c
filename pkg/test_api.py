import pytest
from fastapi.testclient import TestClient

from app.main import app


@pytest.fixture(scope="module")
def client():
    with TestClient(app) as c:
        yield c


def test_list_presets(client):
    resp = client.get("/api/presets")
    assert resp.status_code == 200
    body = resp.json()
    assert "tiny-32" in body["presets"]
    assert "chain" in body["kernels"]


def test_show_preset(client):
    resp = client.get("/api/presets/tiny-32")
    assert resp.status_code == 200
    assert resp.json()["banks_per_tile"] == 16
    assert client.get("/api/presets/nosuch").status_code == 404


def test_run_fft(client):
    resp = client.post("/api/runs", json={"preset": "tiny-32", "kernel": "fft", "seed": 2})
    assert resp.status_code == 200
    body = resp.json()
    assert body["passed"]
    assert body["regions"][0]["mismatches"] == 0
    assert body["report"]["schema"] == "clustersim.metrics/1"
    assert body["report"]["kernels"]["fft"]["ipc"] > 0
    runs = client.get("/api/runs").json()["runs"]
    assert runs[-1]["kernel"] == "fft"
    assert runs[-1]["finished_at"].endswith("Z")


def test_run_rejections(client):
    assert client.post("/api/runs", json={"preset": "tiny-32", "kernel": "program"}).status_code == 400
    assert client.post("/api/runs", json={"preset": "nosuch"}).status_code == 400
    bad_workload = {"preset": "tiny-32", "kernel": "bf", "workload": {"n_tx": 9}}
    assert client.post("/api/runs", json=bad_workload).status_code == 400
    assert client.post("/api/runs", json={"preset": "tiny-32", "colour": 1}).status_code == 422


def test_check(client):
    report = client.post("/api/runs", json={"preset": "tiny-32", "kernel": "compute"}).json()["report"]
    expectations = {
        "schema": "clustersim.expectations/1",
        "checks": [{"metric": "ipc", "kernel": "compute", "comparator": ">=", "threshold": 0.9}],
    }
    resp = client.post("/api/check", json={"report": report, "expectations": expectations})
    assert resp.status_code == 200
    assert resp.json()["passed"]
    bad = client.post("/api/check", json={"report": {}, "expectations": expectations})
    assert bad.status_code == 422
    bad = client.post("/api/check", json={"report": report, "expectations": {"checks": []}})
    assert bad.status_code == 422
