import pytest
from fastapi.testclient import TestClient

from app.main import app


@pytest.fixture
def client(tmp_output):
    return TestClient(app)


def test_root_lists_endpoints(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["endpoints"]["run"] == "/api/v1/experiments/run"


def test_service_health(client):
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["service"] == "reconstruction-lab"


def test_experiment_health_and_kinds(client):
    health = client.get("/api/v1/experiments/health").json()
    assert health["status"] == "healthy"
    kinds = client.get("/api/v1/experiments/kinds").json()
    assert len(kinds) == 9 and "sewing-bridge" in kinds
    assert health["experiment_kinds"] == kinds


def test_run_identity_suite(client, tmp_output):
    payload = {"kind": "identity-suite", "seed": 2, "samples": 3, "output_dir": str(tmp_output / "api")}
    response = client.post("/api/v1/experiments/run", json=payload)
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "ok"
    assert "manifest.json" in body["artifacts"]
    assert (tmp_output / "api" / "identity_suite.csv").exists()


def test_invalid_configuration_is_rejected(client):
    response = client.post("/api/v1/experiments/run", json={"kind": "reconstruct", "seed": 1})
    assert response.status_code == 422
    assert response.json()["error"] == "Invalid configuration"


def test_lab_errors_map_to_bad_request(client, tmp_output):
    payload = {"kind": "walsh-check", "seed": 1, "N": 16, "M": 4, "wavelet": {"family": "coif9"},
               "output_dir": str(tmp_output / "bad")}
    response = client.post("/api/v1/experiments/run", json=payload)
    assert response.status_code == 400


def test_divergence_maps_to_unprocessable(client, tmp_output):
    payload = {"kind": "spde-solve", "seed": 1, "N": 16, "M": 4, "spde": {"max_iter": 1},
               "output_dir": str(tmp_output / "div")}
    response = client.post("/api/v1/experiments/run", json=payload)
    assert response.status_code == 422
    assert response.json()["error"].startswith("Diverged")
