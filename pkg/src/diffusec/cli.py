"""Command-line front end.

Each subcommand reads and writes artifacts under one output directory
(default `out`, overridable with --out or the DIFFUSEC_OUT environment
variable), so the full demo is:

    diffusec gen-data
    diffusec train-codec
    diffusec train-classifier
    diffusec train-denoiser
    diffusec train-agent --epochs 400
    diffusec sweep --snr -6,-3,0,3,6,9,12,15 --mode adaptive
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agent import (AgentState, DdpgNets, greedy_rollout, load_agent,
                    save_agent, train_agent)
from .channel import ChannelConfig, Classifier, train_classifier
from .codec import load_codec, save_codec, init_codec, train_semantic, train_jsc, train_joint
from .ddpm import (DenoiserLoss, TimestepPlan, build_schedule, diffuse,
                   load_denoiser, purify, save_denoiser, train_denoiser,
                   uniform_plan_sampler)
from .errors import ConfigError, DiffusecError
from .harness import (AGENT_LOG_HEADER, METRICS_HEADER, ExperimentConfig,
                      Pipeline, PipelineEnv, ToyDataset, append_csv,
                      dump_gallery, load_config, load_dataset, make_toy_dataset,
                      outcome_row, resolve_out_dir, run_pipeline, save_dataset,
                      sweep_snr, train_stack_agent, write_sweep_csv)
from .nn import forward, load_net, save_net
from .sync import SyncSession, run_handshake
from .tensor import load_tensor, make_rng, save_tensor, split_rng


def _base_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _component_rngs(cfg: ExperimentConfig):
    """Same stream split the library orchestrator uses, so CLI-built and
    library-built artifacts match for one seed."""
    return split_rng(make_rng(cfg.seed), 4)


def _load_stack_files(cfg: ExperimentConfig, out: Path, need=("codec", "classifier", "denoiser")):
    data = load_dataset(out, cfg.n_classes)
    train = ToyDataset(data.images[:cfg.n_train], data.labels[:cfg.n_train],
                       data.height, data.width, data.n_classes)
    holdout = ToyDataset(data.images[cfg.n_train:], data.labels[cfg.n_train:],
                         data.height, data.width, data.n_classes)
    parts = {"train": train, "holdout": holdout}
    if "codec" in need:
        parts["codec"] = load_codec(out / "codec.bin")
    if "classifier" in need:
        parts["classifier"] = Classifier(load_net(out / "classifier.bin"), cfg.n_classes)
    if "denoiser" in need:
        parts["denoiser"] = load_denoiser(out / "denoiser.bin")
    return parts


def _pipeline(cfg: ExperimentConfig, parts, with_attack: bool = True) -> Pipeline:
    return Pipeline(codec=parts["codec"], denoiser=parts["denoiser"],
                    classifier=parts["classifier"],
                    schedule=parts["denoiser"].schedule, bounds=cfg.bounds(),
                    attack=cfg.attack() if with_attack else None,
                    reward_cfg=cfg.reward_config(),
                    attack_noise_power=cfg.attack_noise_power)


def _cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    out = resolve_out_dir(cfg)
    rng = _component_rngs(cfg)[0]
    data = make_toy_dataset(cfg.n_train + cfg.n_eval, rng, cfg.image_height,
                            cfg.image_width, cfg.n_classes)
    save_dataset(out, data)
    print(f"wrote {data.images.shape[0]} images "
          f"({cfg.n_train} train / {cfg.n_eval} eval) to {out}")
    return 0


def _cmd_train_codec(args) -> int:
    cfg = _base_config(args)
    out = resolve_out_dir(cfg)
    rng = _component_rngs(cfg)[1]
    parts = _load_stack_files(cfg, out, need=())
    train = parts["train"]
    codec = init_codec(train.images.shape[1], cfg.embed_dim, cfg.symbol_dim, rng)
    phases = ("semantic", "jsc", "joint") if args.phase == "all" else (args.phase,)
    if "semantic" in phases:
        losses = train_semantic(train.images, codec, cfg.iota, cfg.epochs_semantic,
                                rng, batch_size=cfg.batch_semantic)
        print(f"semantic phase: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    if "jsc" in phases:
        embeddings = forward(codec.semantic_encoder, train.images)
        losses = train_jsc(embeddings, codec, ChannelConfig(cfg.snr_db),
                           cfg.epochs_jsc, rng, batch_size=cfg.batch_jsc,
                           snr_range=(cfg.train_snr_low, cfg.train_snr_high))
        print(f"jsc phase: loss {losses[0]:.5f} -> {losses[-1]:.5f}")
    if "joint" in phases:
        report = train_joint(train.images, parts["holdout"].images, codec,
                             ChannelConfig(cfg.snr_db), cfg.iota, cfg.epochs_joint,
                             rng, batch_size=cfg.batch_semantic,
                             snr_range=(cfg.train_snr_low, cfg.train_snr_high))
        print(f"joint phase: holdout ssim {report.holdout_ssim:.3f}, "
              f"gain {report.gain:.3f}")
    save_codec(out / "codec.bin", codec)
    print(f"wrote {out / 'codec.bin'}")
    return 0


def _cmd_train_classifier(args) -> int:
    cfg = _base_config(args)
    out = resolve_out_dir(cfg)
    rng = _component_rngs(cfg)[2]
    train = _load_stack_files(cfg, out, need=())["train"]
    clf, acc = train_classifier(train.images, train.labels, cfg.n_classes,
                                cfg.classifier_epochs, rng,
                                hidden=(cfg.classifier_hidden, cfg.classifier_hidden))
    save_net(out / "classifier.bin", clf.net)
    print(f"train accuracy {acc:.3f}; wrote {out / 'classifier.bin'}")
    return 0


def _cmd_train_denoiser(args) -> int:
    cfg = _base_config(args)
    out = resolve_out_dir(cfg)
    rng = _component_rngs(cfg)[3]
    parts = _load_stack_files(cfg, out, need=("codec",))
    schedule = build_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
    subset = parts["train"].images[:cfg.denoiser_subset]
    sampler = uniform_plan_sampler((5, 30), (0, 10), cfg.bounds())
    denoiser, losses = train_denoiser(
        subset, parts["codec"], ChannelConfig(cfg.snr_db), sampler,
        DenoiserLoss(cfg.zeta, cfg.iota_prime), cfg.epochs_denoiser, rng,
        schedule, hidden=(cfg.denoiser_hidden, cfg.denoiser_hidden),
        batch_size=cfg.batch_denoiser)
    save_denoiser(out / "denoiser.bin", denoiser)
    print(f"denoiser loss {losses[0]:.4f} -> {losses[-1]:.4f}; "
          f"wrote {out / 'denoiser.bin'}")
    return 0


def _cmd_train_agent(args) -> int:
    cfg = _base_config(args)
    cfg = replace(cfg, agent_epochs=args.epochs, agent_episodes=args.episodes,
                  agent_buffer=args.buffer, agent_batch=args.batch,
                  agent_gamma=args.gamma, agent_tau=args.tau,
                  agent_lr_actor=args.lr_actor, agent_lr_critic=args.lr_critic)
    out = resolve_out_dir(cfg)
    parts = _load_stack_files(cfg, out)
    pipeline = _pipeline(cfg, parts)
    rng = make_rng(cfg.seed + 1)
    env = PipelineEnv(pipeline, parts["train"], cfg.env_batch)
    nets, log = train_agent(env, cfg.agent_hyper(), rng)
    save_agent(out / "agent.bin", nets, cfg.agent_hyper())
    append_csv(out / "agent_log.csv", log, AGENT_LOG_HEADER)
    if log:
        tail = [row["reward"] for row in log[-50:]]
        print(f"trained {len(log)} steps; mean reward of last 50: {np.mean(tail):.3f}")
    print(f"wrote {out / 'agent.bin'} and {out / 'agent_log.csv'}")
    return 0


def _table_selector(bounds):
    def select(snr_db: float):
        if snr_db < 0.0:
            return 24, 12
        if snr_db < 6.0:
            return 22, 6
        if snr_db < 12.0:
            return 20, 2
        return 18, 0
    return select


def _policy_selector(nets: DdpgNets, bounds):
    def select(snr_db: float):
        states = greedy_rollout(AgentState(20, 0, snr_db), nets, 3, bounds)
        return states[-1].t_d, states[-1].t_plus
    return select


def _cmd_handshake(args) -> int:
    cfg = _base_config(args)
    out = resolve_out_dir(cfg)
    bounds = cfg.bounds()
    agent_path = out / "agent.bin"
    if agent_path.exists():
        nets, _ = load_agent(agent_path)
        selector = _policy_selector(nets, bounds)
        source = "agent policy"
    else:
        selector = _table_selector(bounds)
        source = "fixed table"
    sender = SyncSession(session_id=args.session, role="sender")
    receiver = SyncSession(session_id=args.session, role="receiver")
    rng = make_rng(cfg.seed + 2)
    plan = run_handshake(sender, receiver, selector,
                         ChannelConfig(args.snr_db, cfg.attack_noise_power),
                         rng, bounds=bounds)
    print(f"agreed plan t_d={plan.t_d} t_plus={plan.t_plus} via {source}; "
          f"receiver measured {receiver.measured_snr_db:.2f} dB "
          f"(true {args.snr_db:.2f} dB)")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _base_config(args)
    out = resolve_out_dir(cfg)
    parts = _load_stack_files(cfg, out)
    pipeline = _pipeline(cfg, parts)
    snrs = [float(s) for s in args.snr.split(",")]
    nets = None
    if args.mode == "adaptive":
        nets, _ = load_agent(out / "agent.bin")
    rng = make_rng(cfg.seed + 3)
    holdout = parts["holdout"]
    result = sweep_snr(snrs, args.mode, pipeline,
                       (holdout.images, holdout.labels), rng, nets=nets)
    path = out / f"sweep_{args.mode}.csv"
    write_sweep_csv(path, result)
    for row in result.rows:
        print(f"snr {row.snr_db:+6.1f} dB  robust {row.robust_accuracy:.3f}  "
              f"clean {row.clean_accuracy:.3f}  ssim {row.ssim_avg:.3f}  "
              f"plan ({row.t_d},{row.t_plus})")
    print(f"wrote {path} ({len(result.rows)} rows)")
    return 0


def _cmd_purify(args) -> int:
    cfg = _base_config(args)
    out = resolve_out_dir(cfg)
    denoiser = load_denoiser(out / "denoiser.bin")
    stack = load_tensor(args.input)
    n, h, w = stack.shape if stack.ndim == 3 else (1, *stack.shape)
    images = stack.reshape(n, h * w)
    plan = TimestepPlan(args.t_d, args.t_plus, cfg.bounds())
    rng = make_rng(cfg.seed + 4)
    noisy = diffuse(images, plan.t_d, denoiser.schedule, rng)
    cleaned = purify(noisy, plan, denoiser, denoiser.schedule, rng)
    dest = Path(args.output)
    save_tensor(dest, cleaned.reshape(n, h, w))
    print(f"purified {n} images with plan ({plan.t_d},{plan.t_plus}); wrote {dest}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _base_config(args)
    out = resolve_out_dir(cfg)
    parts = _load_stack_files(cfg, out)
    pipeline = _pipeline(cfg, parts)
    plan = TimestepPlan(args.t_d, args.t_plus, cfg.bounds())
    rng = make_rng(cfg.seed + 5)
    holdout = parts["holdout"]
    outcome = run_pipeline((holdout.images, holdout.labels), plan, pipeline,
                           ChannelConfig(args.snr_db, cfg.attack_noise_power), rng)
    row = outcome_row(outcome, cfg.reward_config(), plan, args.snr_db)
    append_csv(out / "metrics.csv", [row], METRICS_HEADER)
    dump_gallery(out, f"snr{args.snr_db:+.0f}", outcome, holdout.height, holdout.width)
    print(f"snr {args.snr_db:+.1f} dB plan ({plan.t_d},{plan.t_plus}): "
          f"ssim {row['ssim_avg']:.3f} adv {row['adv_rate']:.3f} "
          f"err {row['err_rate']:.3f} reward {row['reward']:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffusec",
                                     description="secure semantic link simulator")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="master seed override")
    parser.add_argument("--out", help="output directory (or set DIFFUSEC_OUT)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the toy dataset").set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train-codec", help="train the semantic-channel codec")
    p.add_argument("--phase", choices=["all", "semantic", "jsc", "joint"], default="all")
    p.set_defaults(fn=_cmd_train_codec)

    sub.add_parser("train-classifier", help="train the toy classifier") \
        .set_defaults(fn=_cmd_train_classifier)
    sub.add_parser("train-denoiser", help="train the reverse-chain denoiser") \
        .set_defaults(fn=_cmd_train_denoiser)

    p = sub.add_parser("train-agent", help="train the step-selection agent")
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--buffer", type=int, default=1_000_000)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--tau", type=float, default=0.005)
    p.add_argument("--lr-actor", type=float, default=1e-5)
    p.add_argument("--lr-critic", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_train_agent)

    p = sub.add_parser("handshake", help="run one timestep synchronization round")
    p.add_argument("--snr-db", type=float, required=True)
    p.add_argument("--session", type=int, default=1)
    p.set_defaults(fn=_cmd_handshake)

    p = sub.add_parser("sweep", help="robust accuracy across SNRs")
    p.add_argument("--snr", default="-6,-3,0,3,6,9,12,15",
                   help="comma-separated SNR list in dB")
    p.add_argument("--mode", choices=["adaptive", "fixed"], default="adaptive")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("purify", help="diffuse then purify a DTNS image stack")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--t-d", type=int, default=20)
    p.add_argument("--t-plus", type=int, default=0)
    p.set_defaults(fn=_cmd_purify)

    p = sub.add_parser("eval", help="one pipeline round at a fixed plan")
    p.add_argument("--snr-db", type=float, default=9.0)
    p.add_argument("--t-d", type=int, default=20)
    p.add_argument("--t-plus", type=int, default=0)
    p.set_defaults(fn=_cmd_eval)
    return parser


_NEGATIVE_VALUE_FLAGS = {"--snr", "--snr-db"}


def _merge_negative_values(argv):
    """Let `--snr -6,-3,0` parse: argparse reads the value as a flag otherwise."""
    merged, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in _NEGATIVE_VALUE_FLAGS and i + 1 < len(argv) \
                and argv[i + 1].startswith("-"):
            merged.append(f"{tok}={argv[i + 1]}")
            i += 2
        else:
            merged.append(tok)
            i += 1
    return merged


def cli_main(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(_merge_negative_values(list(argv)))
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except DiffusecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    return cli_main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
