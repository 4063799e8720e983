import hashlib
import json
import os
import shutil
import subprocess
import sys
import time
import urllib.error
import urllib.request

import numpy as np
import pytest

from vidimit.cli import build_parser, main, serve_run
from vidimit.feedback import load_annotations
from vidimit.nets import SgdConfig
from vidimit.orchestrator import RunConfig, RunPaths, SyncRun, read_metrics
from vidimit.render import DemoVideo, read_demo, write_demo
from vidimit.simpred import TrainVariant
from vidimit.trpo import TrpoConfig, load_policy


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def file_sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="module")
def hop_demo(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    demo = root / "hop.vdm"
    policy = root / "policy"
    code = main([
        "gen-demo", "--task", "hop", "--steps", "30", "--updates", "2",
        "--steps-per-update", "60", "--out", str(demo), "--seed", "3",
        "--save-policy", str(policy),
    ])
    assert code == 0
    return {"demo": str(demo), "policy": str(policy), "seed": 3}


def train_argv(demo, run_dir, **overrides):
    flags = {
        "--pretrain": 6, "--online": 4, "--cadence": 2, "--updates": 3,
        "--steps-per-update": 60, "--pretrain-epochs": 2, "--refresh-epochs": 1,
        "--variant": "RandomSampling", "--seed": 11,
    }
    flags.update(overrides)
    argv = ["train", "--demo", demo, "--run-dir", str(run_dir)]
    for k, v in flags.items():
        argv += [k, str(v)]
    return argv


@pytest.fixture(scope="module")
def oracle_run(tmp_path_factory, hop_demo):
    run_dir = tmp_path_factory.mktemp("trained")
    assert main(train_argv(hop_demo["demo"], run_dir)) == 0
    return str(run_dir)


@pytest.fixture(scope="module")
def separable_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    ckpt = root / "checkpoints"
    ckpt.mkdir()
    n_clips, length = 400, 9
    n = n_clips * length
    ratings = np.repeat((np.arange(n_clips) % 5) + 1, length).astype(np.uint8)
    obs = np.zeros((n, 10), dtype=np.float64)
    obs[:, 0] = ratings.astype(np.float64) * 2.0 - 6.0  # rating is linear in this coordinate
    obs[:, 1] = np.arange(n) * 1e-9  # unique digests, numerically invisible
    np.save(ckpt / "dataset_frames.npy", np.zeros((n, 64, 64), dtype=np.uint8))
    np.save(ckpt / "dataset_observations.npy", obs)
    np.save(ckpt / "dataset_ratings.npy", ratings)
    return str(root)


class TestParsing:
    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["no-such-command"],
            ["gen-demo", "--task", "hop"],
            ["gen-demo", "--task", "hop", "--steps", "0", "--out", "x.vdm"],
            ["gen-demo", "--task", "cartwheel", "--out", "x.vdm"],
            ["eval", "--policy", "p", "--demo", "d", "--metric", "bleu"],
            ["train", "--demo", "d", "--run-dir", "r", "--cadence", "0"],
            ["variants-report", "--dataset", "d", "--seeds", "0"],
        ],
    )
    def test_flag_problems_exit_2(self, capsys, argv):
        code, _, err = run_cli(capsys, *argv)
        assert code == 2
        assert err.startswith("error: ")
        assert err.strip().count("\n") == 0

    def test_help_exits_0(self, capsys):
        assert run_cli(capsys, "--help")[0] == 0

    def test_every_command_registered(self):
        parser = build_parser()
        text = parser.format_help()
        for name in ("gen-demo", "pretrain", "train", "eval", "serve", "export-video", "variants-report"):
            assert name in text


class TestGenDemo:
    def test_demo_has_states_and_right_length(self, hop_demo):
        demo = read_demo(hop_demo["demo"])
        assert demo.n_frames == 30
        assert demo.has_states
        policy = load_policy(hop_demo["policy"])
        assert policy.horizon == 30

    def test_same_seed_gives_identical_bytes(self, capsys, tmp_path):
        outs = []
        for name in ("a.vdm", "b.vdm"):
            path = tmp_path / name
            code, out, _ = run_cli(
                capsys, "gen-demo", "--task", "hop", "--steps", "12", "--updates", "1",
                "--steps-per-update", "24", "--out", str(path), "--seed", "9",
            )
            assert code == 0
            assert out.startswith("task=hop steps=12 best_reward=")
            outs.append(file_sha(path))
        assert outs[0] == outs[1]

    def test_backflip_line_reports_flip_count(self, capsys, tmp_path):
        code, out, _ = run_cli(
            capsys, "gen-demo", "--task", "backflip", "--steps", "12", "--updates", "1",
            "--steps-per-update", "24", "--out", str(tmp_path / "f.vdm"), "--seed", "2",
        )
        assert code == 0
        assert "backflips=" in out and "best_reward=" in out


class TestEvalCommand:
    def test_mse_on_own_demo_is_identically_zero(self, capsys, hop_demo, tmp_path):
        out_csv = tmp_path / "curve.csv"
        code, out, _ = run_cli(
            capsys, "eval", "--policy", hop_demo["policy"], "--demo", hop_demo["demo"],
            "--metric", "mse", "--seed", str(hop_demo["seed"]), "--out", str(out_csv),
        )
        assert code == 0
        assert "mean_mse=0.0" in out
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "t,mse"
        assert len(lines) == 31
        assert all(line.endswith(",0.0") for line in lines[1:])

    def test_mse_stdout_mode(self, capsys, hop_demo):
        code, out, _ = run_cli(
            capsys, "eval", "--policy", hop_demo["policy"], "--demo", hop_demo["demo"],
            "--metric", "mse", "--seed", "4",
        )
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "t,mse"
        assert len(lines) == 31
        assert float(lines[1].split(",")[1]) >= 0.0

    def test_oracle_rating_reports_per_episode(self, capsys, hop_demo):
        code, out, _ = run_cli(
            capsys, "eval", "--policy", hop_demo["policy"], "--demo", hop_demo["demo"],
            "--metric", "oracle-rating", "--episodes", "2", "--seed", "1",
        )
        assert code == 0
        fields = dict(p.split("=") for p in out.split())
        assert fields["metric"] == "oracle-rating"
        assert 1.0 <= float(fields["mean_rating"]) <= 5.0
        assert len(fields["per_episode"].split(",")) == 2

    def test_reward_metrics_work_without_states(self, capsys, hop_demo, tmp_path):
        frames_only = tmp_path / "frames.vdm"
        demo = read_demo(hop_demo["demo"])
        write_demo(DemoVideo(frames=demo.frames, fps=demo.fps), str(frames_only))
        code, out, _ = run_cli(
            capsys, "eval", "--policy", hop_demo["policy"], "--demo", str(frames_only),
            "--metric", "backflip-reward",
        )
        assert code == 0
        assert "total_reward=" in out and "backflips=" in out
        code, _, err = run_cli(
            capsys, "eval", "--policy", hop_demo["policy"], "--demo", str(frames_only),
            "--metric", "oracle-rating",
        )
        assert code == 1
        assert "states" in err

    def test_missing_policy_is_runtime_error(self, capsys, hop_demo, tmp_path):
        code, _, err = run_cli(
            capsys, "eval", "--policy", str(tmp_path / "nope"), "--demo", hop_demo["demo"],
            "--metric", "mse",
        )
        assert code == 1
        assert err.startswith("error: ")


class TestTrainCommand:
    def test_summary_and_artifacts(self, oracle_run, capsys):
        paths = RunPaths(oracle_run)
        rows = read_metrics(paths.metrics_csv)
        assert [r["update"] for r in rows] == [0, 1, 2]
        assert os.path.exists(paths.predictor_dir(3))
        assert len(load_annotations(paths.annotations_log)) == 10

    def test_same_seed_reproduces_metrics_bytes(self, capsys, hop_demo, tmp_path):
        for sub in ("a", "b"):
            assert main(train_argv(hop_demo["demo"], tmp_path / sub)) == 0
        capsys.readouterr()
        sha_a = file_sha(str(tmp_path / "a" / "metrics.csv"))
        sha_b = file_sha(str(tmp_path / "b" / "metrics.csv"))
        assert sha_a == sha_b
        assert main(train_argv(hop_demo["demo"], tmp_path / "c", **{"--seed": 12})) == 0
        capsys.readouterr()
        assert file_sha(str(tmp_path / "c" / "metrics.csv")) != sha_a

    def test_oracle_needs_demo_states(self, capsys, hop_demo, tmp_path):
        frames_only = tmp_path / "frames.vdm"
        demo = read_demo(hop_demo["demo"])
        write_demo(DemoVideo(frames=demo.frames, fps=demo.fps), str(frames_only))
        code, _, err = run_cli(capsys, *train_argv(str(frames_only), tmp_path / "r"))
        assert code == 1
        assert "ground-truth" in err

    def test_run_dir_reuse_refused(self, capsys, hop_demo, oracle_run):
        code, _, err = run_cli(capsys, *train_argv(hop_demo["demo"], oracle_run))
        assert code == 1
        assert "already holds a run" in err

    def test_init_predictor_fine_tunes(self, capsys, hop_demo, oracle_run, tmp_path):
        src = RunPaths(oracle_run).predictor_dir(3)
        code, out, _ = run_cli(
            capsys,
            *train_argv(hop_demo["demo"], tmp_path / "ft", **{"--init-predictor": src, "--seed": 13}),
        )
        assert code == 0
        assert "updates=3" in out
        code, _, err = run_cli(
            capsys,
            *train_argv(
                hop_demo["demo"], tmp_path / "bad",
                **{"--init-predictor": src, "--variant": "ClassWeights"},
            ),
        )
        assert code == 1
        assert "variant" in err


class TestPretrainCommand:
    def test_pretrain_only_run(self, capsys, hop_demo, tmp_path):
        run_dir = tmp_path / "pre"
        code, out, _ = run_cli(
            capsys, "pretrain", "--demo", hop_demo["demo"], "--run-dir", str(run_dir),
            "--annotations", "4", "--epochs", "1", "--variant", "RandomSampling", "--seed", "5",
        )
        assert code == 0
        assert "annotations=4" in out
        assert "predictor_v1" in out
        paths = RunPaths(str(run_dir))
        assert len(np.load(paths.dataset_file("ratings"))) == 36
        with open(paths.state_json) as fh:
            state = json.load(fh)
        assert state["pretrain_used"] == 4
        assert state["update_count"] == 0


class TestVariantsReport:
    def test_separable_dataset_reaches_full_accuracy(self, capsys, separable_dataset):
        code, out, _ = run_cli(
            capsys, "variants-report", "--dataset", separable_dataset,
            "--seeds", "1", "--epochs", "10", "--lr", "0.1",
        )
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0] == "variant,val_accuracy,test_accuracy,f1_345,f1_45,runs"
        rows = [line.split(",") for line in lines[1:]]
        assert [r[0] for r in rows] == [v.value for v in TrainVariant]
        for row in rows:
            assert float(row[2]) == 1.0
            assert float(row[3]) == 1.0 and float(row[4]) == 1.0
            assert row[5] == "1"

    def test_cells_average_requested_runs(self, capsys, separable_dataset):
        code, out, _ = run_cli(
            capsys, "variants-report", "--dataset", separable_dataset,
            "--seeds", "2", "--epochs", "0",
        )
        assert code == 0
        for line in out.strip().splitlines()[1:]:
            cells = line.split(",")
            assert cells[5] == "2"
            assert 0.0 <= float(cells[1]) <= 1.0

    def test_small_dataset_refused(self, capsys, oracle_run):
        code, _, err = run_cli(capsys, "variants-report", "--dataset", oracle_run)
        assert code == 1
        assert "too small" in err


class TestExportVideo:
    def test_exports_every_frame_deterministically(self, capsys, hop_demo, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            code, line, _ = run_cli(
                capsys, "export-video", "--traj", hop_demo["demo"], "--out", str(out)
            )
            assert code == 0
            assert "frames=30" in line
        names = sorted(os.listdir(out_a))
        assert len(names) == 30
        assert names[0] == "frame_00000.png"
        with open(out_a / names[0], "rb") as fh:
            assert fh.read(4) == b"\x89PNG"
        assert all(file_sha(str(out_a / n)) == file_sha(str(out_b / n)) for n in names)

    def test_missing_input_fails(self, capsys, tmp_path):
        code, _, err = run_cli(
            capsys, "export-video", "--traj", str(tmp_path / "no.vdm"), "--out", str(tmp_path / "o")
        )
        assert code == 1
        assert err.startswith("error: ")


def http_get(url):
    try:
        with urllib.request.urlopen(url, timeout=10) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()
    except urllib.error.URLError:
        return None, b""  # server gone (run finished mid-poll)


def http_post(url, obj):
    req = urllib.request.Request(
        url, data=json.dumps(obj).encode(), headers={"Content-Type": "application/json"},
        method="POST",
    )
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()
    except urllib.error.URLError:
        return None, b""


class TestServeCommand:
    def test_missing_run_dir_fails(self, capsys, tmp_path):
        code, _, err = run_cli(capsys, "serve", "--run-dir", str(tmp_path / "void"))
        assert code == 1
        assert "missing checkpoint artifact" in err

    def test_status_served_for_checkpointed_run(self, oracle_run):
        from vidimit.service import serve_in_thread

        runner, server = serve_run(oracle_run, port=0)
        serve_in_thread(server)
        try:
            base = f"http://127.0.0.1:{server.server_address[1]}"
            code, body = http_get(base + "/api/status")
            assert code == 200
            status = json.loads(body)
            assert status["update_count"] == 3
            assert status["done"] is False
            assert http_get(base + "/api/pairs/next")[0] == 409
        finally:
            server.shutdown()
            server.server_close()

    def test_resumes_human_run_over_http(self, hop_demo, tmp_path):
        run_dir = tmp_path / "human"
        config = RunConfig(
            demo_path=hop_demo["demo"],
            run_dir=str(run_dir),
            rater="human",
            mode="sync",
            pretrain_annotations=0,
            online_annotations=2,
            cadence=2,
            n_updates=1,
            variant=TrainVariant.RandomSampling,
            trpo=TrpoConfig(steps_per_update=60),
            sgd=SgdConfig(learning_rate=1e-2, batch_size=16),
            pretrain_epochs=1,
            refresh_epochs=1,
            seed=7,
        )
        SyncRun(config)  # writes the initial checkpoint; never started
        proc = subprocess.Popen(
            [sys.executable, "-m", "vidimit.cli", "serve", "--run-dir", str(run_dir), "--port", "0"],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, bufsize=1,
        )
        try:
            banner = proc.stdout.readline()
            assert banner.startswith("serving http://127.0.0.1:")
            port = int(banner.split("http://127.0.0.1:")[1].split("/")[0])
            base = f"http://127.0.0.1:{port}"
            deadline = time.monotonic() + 90
            while time.monotonic() < deadline and proc.poll() is None:
                code, body = http_get(base + "/api/pairs/next")
                if code == 200:
                    pair_id = json.loads(body)["pair_id"]
                    posted, _ = http_post(base + "/api/ratings", {"pair_id": pair_id, "rating": 4})
                    assert posted in (200, 410, None)
                else:
                    time.sleep(0.02)
            out, err = proc.communicate(timeout=30)
            assert proc.returncode == 0, err
            assert "updates=1 annotations=2" in out
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.communicate()
        records = load_annotations(RunPaths(str(run_dir)).annotations_log)
        assert [r.rating for r in records] == [4, 4]
        assert all(r.source == "human" for r in records)

    def test_console_script_installed(self):
        exe = shutil.which("vidimit")
        if exe is None:
            pytest.skip("console script not on PATH")
        proc = subprocess.run([exe, "--help"], capture_output=True, text=True, timeout=60)
        assert proc.returncode == 0
