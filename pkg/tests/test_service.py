import base64
import json
import time
import urllib.error
import urllib.request

import numpy as np
import pytest

from vidimit.feedback import ClipPair, RatingExchange, load_annotations
from vidimit.nets import SgdConfig
from vidimit.orchestrator import RunConfig, RunPaths, SyncRun, deliver_rating
from vidimit.hopper import EnvParams, RandomPolicy, rollout
from vidimit.render import demo_from_trajectory, write_demo
from vidimit.service import RunService, make_server, pair_view, serve_in_thread
from vidimit.simpred import TrainVariant
from vidimit.trpo import TrpoConfig


class FakeClock:
    def __init__(self, t=0.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


class FakeRunner:
    human_mode = True

    def __init__(self, exchange):
        self.exchange = exchange
        self.overflow = []

    def submit_rating(self, pair_id, rating):
        return deliver_rating(self.exchange, pair_id, rating, overflow=self.overflow.append)

    def status(self):
        return {
            "annotations": len(self.overflow),
            "queue_depth": self.exchange.depth,
            "outstanding": self.exchange.outstanding_count,
            "done": False,
        }


def make_pair(i=0):
    return ClipPair(pair_id=f"pair-{i}", demo_start=0, agent_rollout_id="r", agent_start=0, length=9)


def fake_payload(tag=b"d"):
    return {
        "trajectory": None,
        "demo_png": [tag + bytes([k]) for k in range(9)],
        "agent_png": [b"a" + tag + bytes([k]) for k in range(9)],
        "fps": 30,
    }


def get(url):
    try:
        with urllib.request.urlopen(url, timeout=10) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()


def post_raw(url, data):
    req = urllib.request.Request(
        url, data=data, headers={"Content-Type": "application/json"}, method="POST"
    )
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()


def post_json(url, obj):
    return post_raw(url, json.dumps(obj).encode("utf-8"))


@pytest.fixture
def http_service():
    servers = []

    def build(runner, ui_dir=None):
        server = make_server(runner, port=0, ui_dir=ui_dir)
        serve_in_thread(server)
        servers.append(server)
        return f"http://127.0.0.1:{server.server_address[1]}"

    yield build
    for server in servers:
        server.shutdown()
        server.server_close()


class TestPairView:
    def test_round_trips_frame_bytes(self):
        pair, payload = make_pair(), fake_payload()
        view = pair_view(pair, payload)
        assert view["pair_id"] == "pair-0"
        assert view["length"] == 9 and view["fps"] == 30
        assert [base64.b64decode(f) for f in view["demo_frames"]] == payload["demo_png"]
        assert [base64.b64decode(f) for f in view["agent_frames"]] == payload["agent_png"]


class TestPairsEndpoint:
    def test_empty_queue_gives_204(self, http_service):
        base = http_service(FakeRunner(RatingExchange()))
        code, body = get(base + "/api/pairs/next")
        assert code == 204 and body == b""

    def test_two_gets_lease_two_distinct_pairs(self, http_service):
        exchange = RatingExchange()
        runner = FakeRunner(exchange)
        base = http_service(runner)
        exchange.enqueue(make_pair(0), fake_payload(b"p0"))
        exchange.enqueue(make_pair(1), fake_payload(b"p1"))
        code_a, body_a = get(base + "/api/pairs/next")
        code_b, body_b = get(base + "/api/pairs/next")
        assert code_a == code_b == 200
        ids = {json.loads(body_a)["pair_id"], json.loads(body_b)["pair_id"]}
        assert ids == {"pair-0", "pair-1"}
        view = json.loads(body_a)
        assert len(view["demo_frames"]) == len(view["agent_frames"]) == 9

    def test_oracle_mode_gets_409(self, http_service):
        runner = FakeRunner(RatingExchange())
        runner.human_mode = False
        base = http_service(runner)
        code, body = get(base + "/api/pairs/next")
        assert code == 409
        assert "human" in json.loads(body)["error"]

    def test_expired_lease_reserves_identical_bytes(self, http_service):
        clock = FakeClock()
        exchange = RatingExchange(clock=clock)
        base = http_service(FakeRunner(exchange))
        exchange.enqueue(make_pair(7), fake_payload(b"stable"))
        code_a, body_a = get(base + "/api/pairs/next")
        clock.advance(121.0)
        code_b, body_b = get(base + "/api/pairs/next")
        assert code_a == code_b == 200
        assert body_a == body_b
        assert json.loads(body_b)["pair_id"] == "pair-7"

    def test_submitting_after_expiry_gets_410_then_release_works(self, http_service):
        clock = FakeClock()
        exchange = RatingExchange(clock=clock)
        runner = FakeRunner(exchange)
        base = http_service(runner)
        exchange.enqueue(make_pair(3), fake_payload())
        get(base + "/api/pairs/next")
        clock.advance(121.0)
        code, _ = post_json(base + "/api/ratings", {"pair_id": "pair-3", "rating": 4})
        assert code == 410
        code, _ = get(base + "/api/pairs/next")
        assert code == 200
        code, _ = post_json(base + "/api/ratings", {"pair_id": "pair-3", "rating": 4})
        assert code == 200
        assert [item[0].pair_id for item in runner.overflow] == ["pair-3"]


class TestRatingsEndpoint:
    def test_valid_submission_acknowledged_once(self, http_service):
        exchange = RatingExchange()
        runner = FakeRunner(exchange)
        base = http_service(runner)
        exchange.enqueue(make_pair(0), fake_payload())
        get(base + "/api/pairs/next")
        code, body = post_json(base + "/api/ratings", {"pair_id": "pair-0", "rating": 5})
        assert code == 200
        assert json.loads(body) == {"ok": True, "pair_id": "pair-0", "rating": 5}
        code, _ = post_json(base + "/api/ratings", {"pair_id": "pair-0", "rating": 5})
        assert code == 410
        assert len(runner.overflow) == 1

    @pytest.mark.parametrize(
        "payload",
        [
            {"pair_id": "pair-0", "rating": 0},
            {"pair_id": "pair-0", "rating": 6},
            {"pair_id": "pair-0", "rating": "3"},
            {"pair_id": "pair-0", "rating": True},
            {"pair_id": 17, "rating": 3},
            {"pair_id": "pair-0"},
            {"rating": 3},
        ],
    )
    def test_bad_submissions_get_400(self, http_service, payload):
        exchange = RatingExchange()
        base = http_service(FakeRunner(exchange))
        exchange.enqueue(make_pair(0), fake_payload())
        get(base + "/api/pairs/next")
        code, _ = post_json(base + "/api/ratings", payload)
        assert code == 400

    def test_malformed_json_gets_400(self, http_service):
        base = http_service(FakeRunner(RatingExchange()))
        code, body = post_raw(base + "/api/ratings", b"{nope")
        assert code == 400
        assert "JSON" in json.loads(body)["error"]

    def test_unknown_pair_gets_410(self, http_service):
        base = http_service(FakeRunner(RatingExchange()))
        code, _ = post_json(base + "/api/ratings", {"pair_id": "ghost", "rating": 3})
        assert code == 410

    def test_unknown_endpoints_get_404(self, http_service):
        base = http_service(FakeRunner(RatingExchange()))
        assert post_json(base + "/api/status", {})[0] == 404
        assert get(base + "/api/ratings")[0] == 404
        assert get(base + "/api/nope")[0] == 404


class TestStatusEndpoint:
    def test_reflects_queue_accounting(self, http_service):
        exchange = RatingExchange()
        base = http_service(FakeRunner(exchange))
        for i in range(3):
            exchange.enqueue(make_pair(i), fake_payload())
        get(base + "/api/pairs/next")
        code, body = get(base + "/api/status")
        assert code == 200
        status = json.loads(body)
        assert status["queue_depth"] == 2
        assert status["outstanding"] == 1
        assert status["annotations"] == 0
        assert status["done"] is False


class TestStaticBundle:
    def test_placeholder_page_without_bundle(self, http_service):
        base = http_service(FakeRunner(RatingExchange()))
        code, body = get(base + "/")
        assert code == 200
        assert b"no UI bundle" in body
        assert get(base + "/app.js")[0] == 404

    def test_serves_bundle_files_with_types(self, http_service, tmp_path):
        ui = tmp_path / "dist"
        (ui / "assets").mkdir(parents=True)
        (ui / "index.html").write_bytes(b"<h1>annotator</h1>")
        (ui / "app.js").write_bytes(b"console.log(1)")
        (ui / "assets" / "style.css").write_bytes(b"body{}")
        base = http_service(FakeRunner(RatingExchange()), ui_dir=str(ui))
        code, body = get(base + "/")
        assert code == 200 and body == b"<h1>annotator</h1>"
        with urllib.request.urlopen(base + "/app.js", timeout=10) as resp:
            assert resp.status == 200
            assert resp.headers["Content-Type"].startswith("application/javascript")
            assert resp.read() == b"console.log(1)"
        assert get(base + "/assets/style.css") == (200, b"body{}")
        assert get(base + "/missing.js")[0] == 404

    def test_paths_outside_bundle_are_refused(self, tmp_path):
        ui = tmp_path / "dist"
        ui.mkdir()
        (ui / "index.html").write_bytes(b"ok")
        (tmp_path / "secret.txt").write_bytes(b"hidden")
        service = RunService(FakeRunner(RatingExchange()), ui_dir=str(ui))
        assert service.static_file("/../secret.txt")[0] == 404
        assert service.static_file("/secret.txt")[0] == 404
        assert service.static_file("/index.html")[0] == 200


def make_demo_file(tmp_path, n_steps=30, seed=5):
    traj, _ = rollout(RandomPolicy(amp=0.2), EnvParams(), None, n_steps, seed=seed)
    path = tmp_path / "demo.vdm"
    write_demo(demo_from_trajectory(traj), str(path))
    return str(path)


def service_config(demo_path, run_dir, **overrides):
    base = dict(
        demo_path=demo_path,
        run_dir=str(run_dir),
        rater="human",
        mode="sync",
        pretrain_annotations=1,
        online_annotations=2,
        cadence=2,
        n_updates=1,
        variant=TrainVariant.RandomSampling,
        trpo=TrpoConfig(steps_per_update=60),
        sgd=SgdConfig(learning_rate=1e-2, batch_size=16),
        pretrain_epochs=1,
        refresh_epochs=1,
        seed=6,
    )
    base.update(overrides)
    return RunConfig(**base)


class TestLiveRunIntegration:
    def test_human_run_served_end_to_end(self, http_service, tmp_path):
        demo_path = make_demo_file(tmp_path)
        config = service_config(demo_path, tmp_path / "run")
        runner = SyncRun(config)
        base = http_service(runner)
        runner.start()
        deadline = time.monotonic() + 60
        rated = 0
        while time.monotonic() < deadline:
            code, body = get(base + "/api/pairs/next")
            if code == 200:
                view = json.loads(body)
                assert len(view["demo_frames"]) == len(view["agent_frames"]) == 9
                png = base64.b64decode(view["demo_frames"][0])
                assert png.startswith(b"\x89PNG")
                code, _ = post_json(
                    base + "/api/ratings", {"pair_id": view["pair_id"], "rating": 3}
                )
                assert code == 200
                rated += 1
            elif json.loads(get(base + "/api/status")[1])["done"]:
                break
            else:
                time.sleep(0.01)
        assert runner.join(timeout=30)
        assert rated == 3
        records = load_annotations(RunPaths(config.run_dir).annotations_log)
        assert len(records) == 3
        assert all(r.source == "human" and r.rating == 3 for r in records)
        status = json.loads(get(base + "/api/status")[1])
        assert status["done"] is True
        assert status["annotations"] == 3
        assert status["queue_depth"] == 0 and status["outstanding"] == 0

    def test_oracle_run_serves_status_but_no_pairs(self, http_service, tmp_path):
        demo_path = make_demo_file(tmp_path)
        config = service_config(
            demo_path, tmp_path / "oracle_run", rater="oracle", pretrain_annotations=2
        )
        runner = SyncRun(config)
        base = http_service(runner)
        assert get(base + "/api/pairs/next")[0] == 409
        status = json.loads(get(base + "/api/status")[1])
        assert status["annotations"] == 0 and status["done"] is False
        runner.start()
        assert runner.join(timeout=120)
        status = json.loads(get(base + "/api/status")[1])
        assert status["done"] is True
        assert status["annotations"] == 4
