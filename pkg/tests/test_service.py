"""HTTP contract for the pool-browsing / selection service."""

import json

import pytest
from fastapi.testclient import TestClient

import styletune.rundir as rd
from styletune.synthdata import to_png_bytes

from test_rundir import small_pool


@pytest.fixture()
def run(tmp_path, catalog, codebook):
    run = rd.RunDirectory(tmp_path / "run")
    run.save_pool(small_pool(catalog, codebook, pool_id="pa"))
    run.save_pool(small_pool(catalog, codebook, pool_id="pb", with_ref=False))
    return run


@pytest.fixture()
def client(run):
    from styletune.service import build_app

    return TestClient(build_app(run))


class TestListing:
    def test_empty_run_lists_no_pools(self, tmp_path):
        from styletune.service import build_app

        empty = rd.RunDirectory(tmp_path / "empty")
        resp = TestClient(build_app(empty)).get("/api/pools")
        assert resp.status_code == 200
        assert resp.json() == []

    def test_lists_pool_summaries(self, client):
        resp = client.get("/api/pools")
        assert resp.status_code == 200
        pools = {p["pool_id"]: p for p in resp.json()}
        assert set(pools) == {"pa", "pb"}
        assert pools["pa"] == {
            "pool_id": "pa",
            "n_items": 3,
            "n_prompts": 2,
            "has_reference": True,
            "has_selection": False,
        }
        assert pools["pb"]["has_reference"] is False


class TestPoolDetail:
    def test_detail_includes_items_and_urls(self, client):
        resp = client.get("/api/pools/pa")
        assert resp.status_code == 200
        body = resp.json()
        assert body["pool_id"] == "pa"
        assert body["reference_url"] == "/api/reference/pa.png"
        assert body["has_selection"] is False
        ids = [item["item_id"] for item in body["items"]]
        assert ids == ["pa-0000", "pa-0001", "pa-0002"]
        first = body["items"][0]
        assert first["image_url"] == "/api/images/pa-0000.png"
        assert first["prompt"]["text"] == "a circle in ember style"
        assert isinstance(first["tokens"], list)
        assert first["scores"] == {"text": 0.25, "style": 0.5}

    def test_detail_without_reference(self, client):
        body = client.get("/api/pools/pb").json()
        assert "reference_url" not in body

    def test_unknown_pool_is_404(self, client):
        resp = client.get("/api/pools/nope")
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_pool"


class TestImages:
    def test_item_png_bytes_match_the_stored_file(self, client, run, catalog, codebook):
        resp = client.get("/api/images/pa-0001.png")
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        assert resp.content == (run.pool_dir("pa") / "pa-0001.png").read_bytes()

    def test_reference_png(self, client, run):
        resp = client.get("/api/reference/pa.png")
        assert resp.status_code == 200
        assert resp.content == (run.pool_dir("pa") / "reference.png").read_bytes()

    def test_unknown_item_is_404(self, client):
        resp = client.get("/api/images/pa-9999.png")
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_item"

    def test_missing_reference_is_404(self, client):
        resp = client.get("/api/reference/pb.png")
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_pool"

    def test_item_id_without_pool_prefix_is_404(self, client):
        assert client.get("/api/images/orphan.png").status_code == 404


class TestSelectionPost:
    def test_valid_selection_persists(self, client, run):
        resp = client.post(
            "/api/pools/pa/selection",
            json={"chosen": ["pa-0002", "pa-0000"], "annotator": "desk"},
        )
        assert resp.status_code == 201
        body = resp.json()
        assert body["pool_id"] == "pa"
        assert body["count"] == 2
        assert body["item_ids"] == ["pa-0002", "pa-0000"]
        assert body["timestamp"]
        sel = run.load_selection("pa")
        assert sel.strategy == "human"
        assert sel.item_ids == ("pa-0002", "pa-0000")
        assert sel.annotator == "desk"
        assert sel.timestamp == body["timestamp"]

    def test_second_post_conflicts(self, client):
        assert client.post("/api/pools/pa/selection", json={"chosen": ["pa-0000"]}).status_code == 201
        resp = client.post("/api/pools/pa/selection", json={"chosen": ["pa-0001"]})
        assert resp.status_code == 409
        assert resp.json()["code"] == "selection_exists"

    def test_replace_overwrites(self, client, run):
        client.post("/api/pools/pa/selection", json={"chosen": ["pa-0000"]})
        resp = client.post(
            "/api/pools/pa/selection", params={"replace": "true"}, json={"chosen": ["pa-0001"]}
        )
        assert resp.status_code == 201
        assert run.load_selection("pa").item_ids == ("pa-0001",)

    def test_unknown_ids_are_listed(self, client):
        resp = client.post(
            "/api/pools/pa/selection", json={"chosen": ["pa-0000", "pa-7777", "zz-0001"]}
        )
        assert resp.status_code == 400
        body = resp.json()
        assert body["code"] == "unknown_items"
        assert body["unknown_ids"] == ["pa-7777", "zz-0001"]

    def test_unknown_pool_is_404(self, client):
        resp = client.post("/api/pools/nope/selection", json={"chosen": ["x"]})
        assert resp.status_code == 404
        assert resp.json()["code"] == "unknown_pool"

    @pytest.mark.parametrize(
        "body",
        [
            {"chosen": []},
            {"chosen": "pa-0000"},
            {"chosen": ["pa-0000", "pa-0000"]},
            {"chosen": ["pa-0000", 7]},
            {"chosen": ["pa-0000", "pa-0001", "pa-0002", "pa-0002"]},
            {"chosen": ["pa-0000"], "annotator": 9},
            {},
            [1, 2],
        ],
    )
    def test_malformed_bodies_are_400(self, client, body):
        resp = client.post("/api/pools/pa/selection", json=body)
        assert resp.status_code == 400
        assert resp.json()["code"] == "malformed_body"

    def test_non_json_body_is_400(self, client):
        resp = client.post(
            "/api/pools/pa/selection",
            content=b"not json",
            headers={"content-type": "application/json"},
        )
        assert resp.status_code == 400
        assert resp.json()["code"] == "malformed_body"

    def test_selecting_every_item_is_allowed(self, client):
        resp = client.post(
            "/api/pools/pa/selection", json={"chosen": ["pa-0000", "pa-0001", "pa-0002"]}
        )
        assert resp.status_code == 201


class TestStatelessness:
    def test_restart_sees_persisted_selection(self, run, client):
        from styletune.service import build_app

        client.post("/api/pools/pa/selection", json={"chosen": ["pa-0001"]})
        fresh = TestClient(build_app(rd.RunDirectory(run.root, create=False)))
        listing = {p["pool_id"]: p for p in fresh.get("/api/pools").json()}
        assert listing["pa"]["has_selection"] is True
        detail = fresh.get("/api/pools/pa").json()
        assert detail["selection"]["item_ids"] == ["pa-0001"]
        assert detail["selection"]["strategy"] == "human"


class TestUiMount:
    def test_static_ui_served_when_present(self, tmp_path, catalog, codebook):
        from styletune.service import build_app

        run = rd.RunDirectory(tmp_path / "run")
        ui = tmp_path / "ui"
        ui.mkdir()
        (ui / "index.html").write_text("<!doctype html><title>picker</title>")
        client = TestClient(build_app(run, ui_dir=ui))
        resp = client.get("/ui/")
        assert resp.status_code == 200
        assert "picker" in resp.text

    def test_missing_ui_dir_is_not_mounted(self, client):
        assert client.get("/ui/").status_code == 404
