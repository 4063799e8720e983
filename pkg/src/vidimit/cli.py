"""Command-line entry points: demo generation, runs, evaluation, reports, serving.

Every command either exits 0 or prints a single ``error: ...`` line to stderr
and exits nonzero (2 for flag problems, 1 for runtime failures). Commands with
a --seed flag are bit-deterministic in sync mode.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .feedback import CLIP_LENGTH, OracleUnavailableError
from .hopper import (
    EnvParams,
    backflip_reward,
    count_backflips,
    hop_reward,
    rollout,
)
from .nets import SgdConfig
from .orchestrator import (
    _SEED_POLICY,
    _SEED_PREDICTOR,
    _SEED_ROLLOUT,
    AsyncRun,
    RunConfig,
    RunPaths,
    SyncRun,
    _sub_seed,
    evaluate_against_demo,
    read_dataset,
    run,
    state_mse_curve,
)
from .render import demo_from_trajectory, encode_png, read_demo, write_demo
from .service import DEFAULT_PORT, make_server, serve_in_thread
from .simpred import TrainVariant, evaluate, make_predictor, train
from .trpo import (
    TrpoConfig,
    collect_rollouts,
    load_policy,
    make_policy,
    make_value_net,
    save_policy,
    trpo_update,
)

TASKS = ("backflip", "hop")
EVAL_METRICS = ("backflip-reward", "hop-reward", "oracle-rating", "mse")
REPORT_SPLIT = (200, 100, 100)  # train/val/test clip counts


class CliError(Exception):
    """Flag-level failure; reported as one line and exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _fmt(value: float) -> str:
    return repr(float(value))


def _hand_reward(task: str):
    """Per-step reward and its whole-trajectory wrapper for a named task."""
    per_step = backflip_reward if task == "backflip" else hop_reward
    def traj_rewards(traj):
        return np.array([per_step(s, a) for s, a in traj.steps], dtype=np.float64)
    return per_step, traj_rewards


# -- commands -------------------------------------------------------------------


def _cmd_gen_demo(args) -> int:
    env = EnvParams()
    per_step, traj_rewards = _hand_reward(args.task)
    policy = make_policy(args.steps, seed=_sub_seed(args.seed, _SEED_POLICY))
    value_net = make_value_net(seed=_sub_seed(args.seed, _SEED_POLICY))
    trpo_cfg = TrpoConfig(steps_per_update=args.steps_per_update)
    best_total, best_traj, best_policy = -np.inf, None, None
    for u in range(args.updates):
        batch, _ = collect_rollouts(
            policy, value_net, env, traj_rewards, args.steps, trpo_cfg,
            seed=_sub_seed(args.seed, _SEED_ROLLOUT, u),
        )
        policy, value_net, _ = trpo_update(policy, value_net, batch, trpo_cfg)
        traj, rewards = rollout(policy, env, per_step, args.steps, seed=args.seed, greedy=True)
        total = float(np.sum(rewards))
        if total > best_total:
            best_total, best_traj, best_policy = total, traj, policy
    write_demo(demo_from_trajectory(best_traj), args.out)
    if args.save_policy:
        save_policy(best_policy, args.save_policy)
    line = f"task={args.task} steps={args.steps} best_reward={_fmt(best_total)}"
    if args.task == "backflip":
        line += f" backflips={count_backflips(best_traj)}"
    print(f"{line} out={args.out}")
    return 0


def _execute_run(config: RunConfig, host: str = "127.0.0.1", port: int | None = None, ui_dir=None):
    """Run to completion; human mode serves the annotator UI while it waits."""
    if config.rater == "human":
        runner = AsyncRun(config) if config.mode == "async" else SyncRun(config)
        server = make_server(runner, host=host, port=DEFAULT_PORT if port is None else port, ui_dir=ui_dir)
        serve_in_thread(server)
        print(f"serving annotator on http://{host}:{server.server_address[1]}/", flush=True)
        try:
            runner.start()
            runner.join()
        finally:
            server.shutdown()
            server.server_close()
        return runner.state
    if config.mode == "async":
        runner = AsyncRun(config)
        runner.start()
        runner.join()
        return runner.state
    return run(config)


def _run_summary(state) -> str:
    return (
        f"updates={state.update_count}"
        f" annotations={state.pretrain_used + state.online_used}"
        f" predictor_version={state.predictor_version}"
        f" run_dir={state.config.run_dir}"
    )


def _cmd_pretrain(args) -> int:
    config = RunConfig(
        demo_path=args.demo,
        run_dir=args.run_dir,
        rater=args.rater,
        mode="sync",
        pretrain_annotations=args.annotations,
        online_annotations=0,
        n_updates=0,
        variant=TrainVariant(args.variant),
        sgd=SgdConfig(learning_rate=args.lr, batch_size=args.batch_size),
        pretrain_epochs=args.epochs,
        seed=args.seed,
    )
    state = _execute_run(config, host=args.host, port=args.port, ui_dir=args.ui_dir)
    paths = RunPaths(config.run_dir)
    print(
        f"annotations={state.pretrain_used}"
        f" predictor={paths.predictor_dir(state.predictor_version)}"
        f" run_dir={config.run_dir}"
    )
    return 0


def _cmd_train(args) -> int:
    config = RunConfig(
        demo_path=args.demo,
        run_dir=args.run_dir,
        rater=args.rater,
        mode=args.mode,
        pretrain_annotations=args.pretrain,
        online_annotations=args.online,
        cadence=args.cadence,
        n_updates=args.updates,
        variant=TrainVariant(args.variant),
        trpo=TrpoConfig(steps_per_update=args.steps_per_update),
        sgd=SgdConfig(learning_rate=args.lr, batch_size=args.batch_size),
        pretrain_epochs=args.pretrain_epochs,
        refresh_epochs=args.refresh_epochs,
        init_predictor=args.init_predictor,
        seed=args.seed,
    )
    state = _execute_run(config, host=args.host, port=args.port, ui_dir=args.ui_dir)
    print(_run_summary(state))
    return 0


def _cmd_eval(args) -> int:
    policy = load_policy(args.policy)
    demo = read_demo(args.demo)
    env = EnvParams()
    if args.metric in ("oracle-rating", "mse") and not demo.has_states:
        raise OracleUnavailableError(f"metric {args.metric} needs a demo with ground-truth states")
    if args.metric in ("backflip-reward", "hop-reward"):
        per_step, _ = _hand_reward(args.metric.split("-")[0])
        traj, rewards = rollout(policy, env, per_step, demo.n_frames, seed=args.seed, greedy=True)
        line = f"metric={args.metric} total_reward={_fmt(np.sum(rewards))}"
        if args.metric == "backflip-reward":
            line += f" backflips={count_backflips(traj)}"
        print(line)
        return 0
    if args.metric == "oracle-rating":
        result = evaluate_against_demo(policy, demo, env, n_episodes=args.episodes, seed=args.seed)
        per_episode = ",".join(_fmt(r) for r in result["per_episode_rating"])
        print(
            f"metric=oracle-rating mean_rating={_fmt(result['mean_rating'])}"
            f" episodes={args.episodes} per_episode={per_episode}"
        )
        return 0
    traj, _ = rollout(policy, env, None, demo.n_frames, seed=args.seed, greedy=True)
    curve = state_mse_curve(demo, traj.states_array())
    text = "t,mse\n" + "".join(f"{t},{_fmt(v)}\n" for t, v in enumerate(curve))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"metric=mse mean_mse={_fmt(curve.mean())} out={args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_variants_report(args) -> int:
    samples = read_dataset(args.dataset)
    n_train, n_val, n_test = (n * CLIP_LENGTH for n in REPORT_SPLIT)
    if len(samples) < n_train + n_val + n_test:
        raise ValueError(
            f"dataset too small for the {'/'.join(map(str, REPORT_SPLIT))} clip split:"
            f" {len(samples) // CLIP_LENGTH} clips"
        )
    train_set = samples[:n_train]
    train_digests = {s.digest() for s in train_set}
    val_set = [s for s in samples[n_train:n_train + n_val] if s.digest() not in train_digests]
    if not val_set:
        raise ValueError("every validation clip duplicates a training clip; dataset is degenerate")
    test_set = samples[n_train + n_val:n_train + n_val + n_test]
    sgd = SgdConfig(learning_rate=args.lr, batch_size=args.batch_size)
    obs_dim = train_set[0].observation.shape[0]
    print("variant,val_accuracy,test_accuracy,f1_345,f1_45,runs")
    for variant in TrainVariant:
        val_acc, test_acc, f1_345, f1_45 = [], [], [], []
        for k in range(args.seeds):
            seed = _sub_seed(args.seed, _SEED_PREDICTOR, k)
            pred = make_predictor(variant, obs_dim, seed=seed)
            pred, _ = train(pred, train_set, val_set, variant, sgd, args.epochs, seed=seed)
            val_acc.append(evaluate(pred, val_set).accuracy)
            test = evaluate(pred, test_set)
            test_acc.append(test.accuracy)
            f1_345.append(test.f1_345)
            f1_45.append(test.f1_45)
        print(
            f"{variant.value},{_fmt(np.mean(val_acc))},{_fmt(np.mean(test_acc))},"
            f"{_fmt(np.mean(f1_345))},{_fmt(np.mean(f1_45))},{args.seeds}"
        )
    return 0


def _cmd_export_video(args) -> int:
    demo = read_demo(args.traj)
    os.makedirs(args.out, exist_ok=True)
    for i, frame in enumerate(demo.frames):
        with open(os.path.join(args.out, f"frame_{i:05d}.png"), "wb") as fh:
            fh.write(encode_png(frame))
    print(f"frames={demo.n_frames} out={args.out}")
    return 0


def serve_run(run_dir: str, host: str = "127.0.0.1", port: int = DEFAULT_PORT, ui_dir=None):
    """Resume a checkpointed run and serve it; returns (runner, server) unstarted."""
    runner = SyncRun.from_checkpoint(run_dir)
    server = make_server(runner, host=host, port=port, ui_dir=ui_dir)
    return runner, server


def _cmd_serve(args) -> int:
    runner, server = serve_run(args.run_dir, host=args.host, port=args.port, ui_dir=args.ui_dir)
    serve_in_thread(server)
    print(f"serving http://{args.host}:{server.server_address[1]}/ run_dir={args.run_dir}", flush=True)
    try:
        runner.start()
        runner.join()
    finally:
        server.shutdown()
        server.server_close()
    print(_run_summary(runner.state))
    return 0


# -- parser ---------------------------------------------------------------------


def _add_run_flags(sub, human_default_ok=True):
    sub.add_argument("--rater", choices=("oracle", "human"), default="oracle")
    sub.add_argument("--variant", choices=[v.value for v in TrainVariant],
                     default=TrainVariant.AdditionalLayer.value)
    sub.add_argument("--lr", type=float, default=SgdConfig().learning_rate)
    sub.add_argument("--batch-size", type=_positive_int, default=SgdConfig().batch_size)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--host", default="127.0.0.1")
    sub.add_argument("--port", type=int, default=None, help="annotator port in human mode (0 = ephemeral)")
    sub.add_argument("--ui-dir", default=None, help="static annotator bundle to serve at /")


def build_parser() -> _Parser:
    parser = _Parser(prog="vidimit", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-demo", help="train a baseline agent on a hand-coded reward and save its best episode")
    gen.add_argument("--task", choices=TASKS, required=True)
    gen.add_argument("--steps", type=_positive_int, default=240, help="episode length in frames")
    gen.add_argument("--out", required=True, help="output .vdm path")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--updates", type=_positive_int, default=60)
    gen.add_argument("--steps-per-update", type=_positive_int, default=TrpoConfig().steps_per_update)
    gen.add_argument("--save-policy", default=None, help="also save the winning policy checkpoint here")
    gen.set_defaults(func=_cmd_gen_demo)

    pre = commands.add_parser("pretrain", help="collect random-policy annotations and train the initial predictor")
    pre.add_argument("--demo", required=True)
    pre.add_argument("--run-dir", required=True)
    pre.add_argument("--annotations", type=_nonneg_int, default=200)
    pre.add_argument("--epochs", type=_nonneg_int, default=30)
    _add_run_flags(pre)
    pre.set_defaults(func=_cmd_pretrain)

    tr = commands.add_parser("train", help="full run: pretrain, then alternate policy updates and predictor refreshes")
    tr.add_argument("--demo", required=True)
    tr.add_argument("--run-dir", required=True)
    tr.add_argument("--mode", choices=("sync", "async"), default="sync")
    tr.add_argument("--pretrain", type=_nonneg_int, default=200, help="pretraining annotation budget")
    tr.add_argument("--online", type=_nonneg_int, default=150, help="online annotation budget")
    tr.add_argument("--cadence", type=_positive_int, default=5, help="pairs rated per policy update")
    tr.add_argument("--updates", type=_nonneg_int, default=60)
    tr.add_argument("--steps-per-update", type=_positive_int, default=TrpoConfig().steps_per_update)
    tr.add_argument("--pretrain-epochs", type=_nonneg_int, default=30)
    tr.add_argument("--refresh-epochs", type=_nonneg_int, default=10)
    tr.add_argument("--init-predictor", default=None, help="predictor checkpoint to fine-tune from")
    _add_run_flags(tr)
    tr.set_defaults(func=_cmd_train)

    ev = commands.add_parser("eval", help="score a policy checkpoint against a demo")
    ev.add_argument("--policy", required=True, help="policy checkpoint directory")
    ev.add_argument("--demo", required=True)
    ev.add_argument("--metric", choices=EVAL_METRICS, required=True)
    ev.add_argument("--episodes", type=_positive_int, default=5)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", default=None, help="write the mse CSV curve here instead of stdout")
    ev.set_defaults(func=_cmd_eval)

    rep = commands.add_parser("variants-report", help="train every predictor variant on a checkpointed dataset and tabulate accuracy/F1")
    rep.add_argument("--dataset", required=True, help="run directory holding checkpointed dataset arrays")
    rep.add_argument("--seeds", type=_positive_int, default=2)
    rep.add_argument("--epochs", type=_nonneg_int, default=30)
    rep.add_argument("--lr", type=float, default=SgdConfig().learning_rate)
    rep.add_argument("--batch-size", type=_positive_int, default=SgdConfig().batch_size)
    rep.add_argument("--seed", type=int, default=0)
    rep.set_defaults(func=_cmd_variants_report)

    ex = commands.add_parser("export-video", help="render a saved trajectory to numbered PNG frames")
    ex.add_argument("--traj", required=True, help=".vdm file to export")
    ex.add_argument("--out", required=True, help="output directory")
    ex.set_defaults(func=_cmd_export_video)

    sv = commands.add_parser("serve", help="resume a checkpointed run and serve its annotator")
    sv.add_argument("--run-dir", required=True)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=DEFAULT_PORT, help="0 picks an ephemeral port")
    sv.add_argument("--ui-dir", default=None)
    sv.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
