"""HTTP service tests via the in-process test client."""

import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from lrgauss import lowrank
from lrgauss.service import create_app
from lrgauss.trainer import load_checkpoint


def floats(b64: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(b64), dtype="<f8")


@pytest.fixture()
def client(vae_checkpoint):
    app = create_app(load_checkpoint(vae_checkpoint))
    with TestClient(app) as c:
        yield c


@pytest.fixture()
def tiny_client(vae_checkpoint):
    app = create_app(load_checkpoint(vae_checkpoint), max_edits=2, max_sessions=2)
    with TestClient(app) as c:
        yield c


class TestModelEndpoint:
    def test_echoes_checkpoint_geometry(self, client):
        resp = client.get("/api/model")
        assert resp.status_code == 200
        assert resp.json() == {
            "width": 8,
            "height": 8,
            "channels": 1,
            "rank": 4,
            "latent_dim": 4,
        }

    def test_unknown_route_404(self, client):
        assert client.get("/api/nothing").status_code == 404

    def test_dist_only_reports_zero_latent(self, rank1_dist_checkpoint):
        app = create_app(load_checkpoint(rank1_dist_checkpoint))
        with TestClient(app) as c:
            assert c.get("/api/model").json()["latent_dim"] == 0


class TestSampleEndpoint:
    def test_same_seed_same_payload_distinct_sessions(self, client):
        a = client.post("/api/sample", json={"seed": 5}).json()
        b = client.post("/api/sample", json={"seed": 5}).json()
        assert a["mean"] == b["mean"]
        assert a["sample"] == b["sample"]
        assert a["mean_png"] == b["mean_png"]
        assert a["session_id"] != b["session_id"]

    def test_missing_seed_is_400(self, client):
        assert client.post("/api/sample", json={}).status_code == 400

    def test_sample_recomposes_from_debug_internals(self, client):
        resp = client.post("/api/sample", json={"seed": 8}).json()
        debug = client.get(f"/api/session/{resp['session_id']}/debug").json()
        mean = floats(debug["mean"])
        rank = debug["rank"]
        p = floats(debug["cov_factor"]).reshape(mean.size, rank)
        d = floats(debug["cov_diag"])
        omega_p = floats(debug["omega_p"])
        omega_d = floats(debug["omega_d"])
        recomposed = mean + p @ omega_p + np.sqrt(d) * omega_d
        np.testing.assert_array_equal(recomposed, floats(resp["sample"]))

    def test_all_values_finite(self, client):
        resp = client.post("/api/sample", json={"seed": 1}).json()
        assert np.all(np.isfinite(floats(resp["mean"])))
        assert np.all(np.isfinite(floats(resp["sample"])))


class TestScaleEndpoint:
    def test_all_ones_returns_original_sample(self, client):
        made = client.post("/api/sample", json={"seed": 3}).json()
        scaled = client.post(
            "/api/scale",
            json={"session_id": made["session_id"], "coefficients": [1.0] * 4},
        ).json()
        assert scaled["sample"] == made["sample"]
        assert scaled["sample_png"] == made["sample_png"]

    def test_all_zeros_removes_correlated_part(self, client):
        made = client.post("/api/sample", json={"seed": 4}).json()
        debug = client.get(f"/api/session/{made['session_id']}/debug").json()
        scaled = client.post(
            "/api/scale",
            json={"session_id": made["session_id"], "coefficients": [0.0] * 4},
        ).json()
        mean = floats(debug["mean"])
        d = floats(debug["cov_diag"])
        omega_d = floats(debug["omega_d"])
        want = mean + np.sqrt(d) * omega_d
        np.testing.assert_allclose(floats(scaled["sample"]), want, atol=1e-12)

    def test_wrong_length_is_400(self, client):
        made = client.post("/api/sample", json={"seed": 1}).json()
        resp = client.post(
            "/api/scale", json={"session_id": made["session_id"], "coefficients": [1.0]}
        )
        assert resp.status_code == 400

    def test_unknown_session_is_404(self, client):
        resp = client.post("/api/scale", json={"session_id": "s999999", "coefficients": [1.0] * 4})
        assert resp.status_code == 404

    def test_scaling_is_stateless_per_request(self, client):
        made = client.post("/api/sample", json={"seed": 6}).json()
        sid = made["session_id"]
        client.post("/api/scale", json={"session_id": sid, "coefficients": [2.0] * 4})
        again = client.post(
            "/api/scale", json={"session_id": sid, "coefficients": [1.0] * 4}
        ).json()
        assert again["sample"] == made["sample"]

    def test_single_component_sweep_matches_cli_strip(
        self, rank1_dist_checkpoint, tmp_path
    ):
        from PIL import Image

        from lrgauss.cli import main

        out = tmp_path / "strips"
        assert (
            main(
                [
                    "scale",
                    "--checkpoint",
                    rank1_dist_checkpoint,
                    "--seed",
                    "15",
                    "--out-dir",
                    str(out),
                    "--scale-min",
                    "-1",
                    "--scale-max",
                    "1",
                    "--scale-step",
                    "1",
                ]
            )
            == 0
        )
        strip = np.asarray(Image.open(out / "component_00.png"))

        app = create_app(load_checkpoint(rank1_dist_checkpoint))
        with TestClient(app) as c:
            made = c.post("/api/sample", json={"seed": 15}).json()
            for col, s in enumerate([-1.0, 0.0, 1.0]):
                resp = c.post(
                    "/api/scale",
                    json={"session_id": made["session_id"], "coefficients": [s]},
                ).json()
                png = base64.b64decode(resp["sample_png"])
                tile = np.asarray(Image.open(__import__("io").BytesIO(png)))
                np.testing.assert_array_equal(strip[:, col * 8 : (col + 1) * 8], tile)


class TestEditEndpoint:
    def test_empty_edit_list_is_identity(self, client):
        made = client.post("/api/sample", json={"seed": 2}).json()
        resp = client.post(
            "/api/edit", json={"session_id": made["session_id"], "edits": []}
        ).json()
        assert resp["conditioned_image"] == made["sample"]

    def test_matches_cli_edit_for_identical_inputs(self, client, vae_checkpoint, tmp_path):
        from lrgauss.cli import main

        edits = tmp_path / "edits.csv"
        edits.write_text("2,5,0,0.85\n")
        out = tmp_path / "out"
        assert (
            main(
                [
                    "edit",
                    "--checkpoint",
                    vae_checkpoint,
                    "--edits",
                    str(edits),
                    "--seed",
                    "13",
                    "--out-dir",
                    str(out),
                ]
            )
            == 0
        )
        made = client.post("/api/sample", json={"seed": 13}).json()
        resp = client.post(
            "/api/edit",
            json={
                "session_id": made["session_id"],
                "edits": [{"x": 2, "y": 5, "c": 0, "value": 0.85}],
            },
        ).json()
        png = base64.b64decode(resp["conditioned_png"])
        assert png == (out / "after.png").read_bytes()

    def test_edited_pixels_carry_their_values(self, client):
        made = client.post("/api/sample", json={"seed": 9}).json()
        resp = client.post(
            "/api/edit",
            json={
                "session_id": made["session_id"],
                "edits": [{"x": 1, "y": 1, "c": 0, "value": 0.33}],
            },
        ).json()
        img = floats(resp["conditioned_image"])
        assert img[(1 * 8 + 1) * 1] == 0.33

    def test_sequential_edits_compose_and_differ_from_joint(self, client):
        e1 = {"x": 1, "y": 1, "c": 0, "value": 0.9}
        e2 = {"x": 6, "y": 6, "c": 0, "value": 0.1}

        made = client.post("/api/sample", json={"seed": 21}).json()
        sid = made["session_id"]
        first = client.post("/api/edit", json={"session_id": sid, "edits": [e1]}).json()
        second = client.post("/api/edit", json={"session_id": sid, "edits": [e2]}).json()

        made_joint = client.post("/api/sample", json={"seed": 21}).json()
        joint = client.post(
            "/api/edit", json={"session_id": made_joint["session_id"], "edits": [e1, e2]}
        ).json()

        # sequential semantics: the second edit conditions on the first's
        # output; replay that composition locally
        debug = client.get(f"/api/session/{sid}/debug").json()
        mean = floats(debug["mean"])
        rank = debug["rank"]
        dist = lowrank.LowRankGaussian(
            mu=mean,
            cov_factor=floats(debug["cov_factor"]).reshape(mean.size, rank),
            cov_diag=floats(debug["cov_diag"]),
        )
        after1 = lowrank.apply_edits(
            dist, floats(made["sample"]), np.array([(1 * 8 + 1)]), np.array([0.9])
        )
        np.testing.assert_allclose(floats(first["conditioned_image"]), after1, atol=1e-12)
        after2 = lowrank.apply_edits(dist, after1, np.array([(6 * 8 + 6)]), np.array([0.1]))
        np.testing.assert_allclose(floats(second["conditioned_image"]), after2, atol=1e-12)

        # joint conditioning in one request is a different operation
        assert not np.allclose(floats(joint["conditioned_image"]), after2, atol=1e-9)

    def test_reset_restores_original_sample(self, client):
        made = client.post("/api/sample", json={"seed": 30}).json()
        sid = made["session_id"]
        client.post(
            "/api/edit",
            json={"session_id": sid, "edits": [{"x": 0, "y": 0, "c": 0, "value": 1.0}]},
        )
        resp = client.post("/api/edit", json={"session_id": sid, "edits": [], "reset": True}).json()
        assert resp["conditioned_image"] == made["sample"]

    def test_edit_limit_is_422(self, tiny_client):
        made = tiny_client.post("/api/sample", json={"seed": 1}).json()
        edits = [{"x": i, "y": 0, "c": 0, "value": 0.5} for i in range(3)]
        resp = tiny_client.post(
            "/api/edit", json={"session_id": made["session_id"], "edits": edits}
        )
        assert resp.status_code == 422

    def test_bad_coordinates_are_400(self, client):
        made = client.post("/api/sample", json={"seed": 1}).json()
        resp = client.post(
            "/api/edit",
            json={
                "session_id": made["session_id"],
                "edits": [{"x": 8, "y": 0, "c": 0, "value": 0.5}],
            },
        )
        assert resp.status_code == 400

    def test_bad_value_is_400(self, client):
        made = client.post("/api/sample", json={"seed": 1}).json()
        resp = client.post(
            "/api/edit",
            json={
                "session_id": made["session_id"],
                "edits": [{"x": 0, "y": 0, "c": 0, "value": 1.2}],
            },
        )
        assert resp.status_code == 400

    def test_duplicate_coordinates_are_400(self, client):
        made = client.post("/api/sample", json={"seed": 1}).json()
        op = {"x": 0, "y": 0, "c": 0, "value": 0.5}
        resp = client.post(
            "/api/edit", json={"session_id": made["session_id"], "edits": [op, op]}
        )
        assert resp.status_code == 400


class TestSessions:
    def test_lru_eviction(self, tiny_client):
        sids = [
            tiny_client.post("/api/sample", json={"seed": i}).json()["session_id"]
            for i in range(3)
        ]
        gone = tiny_client.post(
            "/api/scale", json={"session_id": sids[0], "coefficients": [1.0] * 4}
        )
        assert gone.status_code == 404
        alive = tiny_client.post(
            "/api/scale", json={"session_id": sids[2], "coefficients": [1.0] * 4}
        )
        assert alive.status_code == 200

    def test_replay_from_fresh_server_is_identical(self, vae_checkpoint):
        def transcript():
            app = create_app(load_checkpoint(vae_checkpoint))
            with TestClient(app) as c:
                out = []
                made = c.post("/api/sample", json={"seed": 17}).json()
                out.append(made)
                out.append(
                    c.post(
                        "/api/edit",
                        json={
                            "session_id": made["session_id"],
                            "edits": [{"x": 3, "y": 3, "c": 0, "value": 0.2}],
                        },
                    ).json()
                )
                out.append(
                    c.post(
                        "/api/scale",
                        json={"session_id": made["session_id"], "coefficients": [0.5] * 4},
                    ).json()
                )
                return out

        assert transcript() == transcript()
