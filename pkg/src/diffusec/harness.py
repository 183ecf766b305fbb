"""Experiment orchestration: toy data, the end-to-end pipeline, and sweeps.

Everything here is deterministic given the experiment seed: dataset
generation, the three codec training phases, classifier and denoiser
training, agent training, and the SNR sweeps all draw from child
generators of one master seed.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .agent import (ACTION_SCALE, AgentState, DdpgHyper, DdpgNets, act,
                    apply_action, random_state, step_env_detailed, train_agent)
from .channel import (AttackConfig, ChannelConfig, Classifier, classify,
                      pgd_attack, train_classifier, transmit)
from .codec import (Codec, TrainReport, decode, encode, init_codec,
                    measure_codec_gain, train_joint, train_jsc, train_semantic)
from .ddpm import (Denoiser, DenoiserLoss, NoiseSchedule, PlanBounds,
                   TimestepPlan, build_schedule, purify, train_denoiser,
                   uniform_plan_sampler, diffuse)
from .errors import ConfigError, DataError
from .metrics import BatchOutcome, RewardConfig, adv_rate, err_rate, reward, ssim_avg
from .nn import forward
from .tensor import Rng, load_tensor, make_rng, save_tensor, split_rng

TRAIN_SNRS_DB = (-3.0, 3.0, 9.0, 15.0)

METRICS_HEADER = ["step", "snr_db", "t_d", "t_plus", "ssim_avg", "adv_rate",
                  "err_rate", "reward"]
AGENT_LOG_HEADER = ["epoch", "episode"] + METRICS_HEADER
SWEEP_HEADER = ["snr_db", "robust_accuracy", "clean_accuracy", "ssim_avg",
                "t_d", "t_plus", "mean_reward"]


# ---------------------------------------------------------------------------
# Toy dataset: one soft blob per class at a class-specific location, plus
# texture noise, so classification, attack, and purification all have
# something to bite on without full-scale data.


@dataclass
class ToyDataset:
    images: np.ndarray  # [N, H*W] float32 in [0, 1]
    labels: np.ndarray  # [N] int
    height: int
    width: int
    n_classes: int

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.images[idx], self.labels[idx]


def _class_centers(height: int, width: int, n_classes: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes + np.pi / n_classes
    radius = min(height, width) / 3.6
    cy = height / 2.0 - 0.5 + radius * np.sin(angles)
    cx = width / 2.0 - 0.5 + radius * np.cos(angles)
    return np.stack([cy, cx], axis=1)


MARK_SEED = 0xD1F5ECC  # published seed for the per-class frame patterns
MARK_AMPLITUDE = 0.016
MARK_RINGS = 2


def class_marks(height: int, width: int, n_classes: int) -> np.ndarray:
    """Per-class +-1 pixel patterns confined to the outer frame rings.

    These play the role of fragile class features: tiny amplitude, exactly
    class-determined, and the first thing an attacker or heavy noise wipes
    out, while the interior blob carries the robust structure.
    """
    frame = np.zeros((height, width), dtype=bool)
    for r in range(MARK_RINGS):
        frame[r, :] = frame[height - 1 - r, :] = True
        frame[:, r] = frame[:, width - 1 - r] = True
    signs = make_rng(MARK_SEED).integers(0, 2, size=(n_classes, height * width))
    return (signs * 2 - 1).astype(np.float64) * frame.reshape(-1)


def make_toy_dataset(n_images: int, rng: Rng, height: int = 16, width: int = 16,
                     n_classes: int = 4) -> ToyDataset:
    """Balanced toy images, bit-identical for a fixed seed.

    Each image is one soft blob at a class-specific interior location (the
    robust class evidence: strong amplitude, heavy position jitter) plus a
    faint class-specific frame pattern (the fragile evidence) and texture
    noise.
    """
    if n_classes < 2:
        raise ConfigError("need at least two classes")
    if n_images % n_classes != 0:
        raise ConfigError("n_images must be a multiple of the class count")
    centers = _class_centers(height, width, n_classes)
    marks = class_marks(height, width, n_classes)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    labels = np.arange(n_images) % n_classes
    images = np.empty((n_images, height * width), dtype=np.float32)
    for i, k in enumerate(labels):
        cy = centers[k, 0] + rng.uniform(-2.0, 2.0)
        cx = centers[k, 1] + rng.uniform(-2.0, 2.0)
        amp = rng.uniform(0.2, 0.3)
        spread = 2.2 + rng.uniform(-0.3, 0.3)
        bump = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * spread ** 2))
        img = 0.1 + bump + rng.normal(0.0, 0.01, size=(height, width))
        images[i] = np.clip(img.reshape(-1) + MARK_AMPLITUDE * marks[k],
                            0.0, 1.0).astype(np.float32)
    return ToyDataset(images=images, labels=labels.astype(np.int64),
                      height=height, width=width, n_classes=n_classes)


def nearest_centroid_accuracy(data: ToyDataset) -> float:
    """Separability oracle: classify each image by its nearest class mean."""
    centroids = np.stack([data.images[data.labels == k].mean(axis=0)
                          for k in range(data.n_classes)])
    d2 = ((data.images[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == data.labels))


def swap_marks(data: ToyDataset, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Copies of the images wearing a uniformly chosen other class's frame
    pattern, plus the labels the frames now carry.

    Classifier training mixes these in (labels following the frame) to bias
    it toward the fragile feature, the way standard-trained full-scale
    models end up leaning on non-robust features."""
    marks = class_marks(data.height, data.width, data.n_classes)
    swapped = data.images.astype(np.float32).copy()
    frame_labels = np.empty_like(data.labels)
    for i, k in enumerate(data.labels):
        j = int(rng.integers(data.n_classes - 1))
        if j >= k:
            j += 1
        swapped[i] = np.clip(swapped[i] - MARK_AMPLITUDE * marks[k]
                             + MARK_AMPLITUDE * marks[j], 0.0, 1.0)
        frame_labels[i] = j
    return swapped, frame_labels


def randomize_frames(data: ToyDataset, rng: Rng,
                     amplitude_range: tuple[float, float] = (0.01, 0.05)) -> np.ndarray:
    """Copies of the images wearing random frame textures of varied strength.

    Codec training runs on these so the bottleneck treats the frame as
    content to carry rather than something derivable from the interior;
    that is what lets an attacked frame reach the receiver intact."""
    marks = class_marks(data.height, data.width, data.n_classes)
    frame = (marks[0] != 0)
    out = data.images.astype(np.float32).copy()
    n_frame = int(frame.sum())
    for i, k in enumerate(data.labels):
        u = float(rng.uniform(*amplitude_range))
        texture = (rng.integers(0, 2, size=n_frame) * 2 - 1).astype(np.float32)
        out[i, frame] = np.clip(out[i, frame] - MARK_AMPLITUDE * marks[k, frame]
                                + u * texture, 0.0, 1.0)
    return out


def save_dataset(out_dir, data: ToyDataset) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_tensor(out_dir / "images.dtns",
                data.images.reshape(-1, data.height, data.width))
    with open(out_dir / "labels.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "label"])
        for i, lab in enumerate(data.labels):
            writer.writerow([i, int(lab)])


def load_dataset(out_dir, n_classes: int) -> ToyDataset:
    out_dir = Path(out_dir)
    stack = load_tensor(out_dir / "images.dtns")
    if stack.ndim != 3:
        raise DataError("images.dtns must hold [N, H, W] images")
    with open(out_dir / "labels.csv", "r", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        labels = np.array([int(row[1]) for row in reader], dtype=np.int64)
    if labels.shape[0] != stack.shape[0]:
        raise DataError("label count does not match image count")
    n, h, w = stack.shape
    return ToyDataset(images=stack.reshape(n, h * w), labels=labels,
                      height=h, width=w, n_classes=n_classes)


# ---------------------------------------------------------------------------
# Experiment configuration


@dataclass
class ExperimentConfig:
    seed: int = 7
    out_dir: str = "out"

    # data
    image_height: int = 16
    image_width: int = 16
    n_classes: int = 4
    n_train: int = 512
    n_eval: int = 256

    # schedule and step budget
    schedule_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_d_max: int = 50
    t_plus_max: int = 49  # keeps both budgets below the desk-scale schedule length

    # codec
    embed_dim: int = 64
    symbol_dim: int = 40
    iota: float = 0.5
    batch_semantic: int = 128
    batch_jsc: int = 64
    epochs_semantic: int = 200
    epochs_jsc: int = 80
    epochs_joint: int = 60
    train_snr_low: float = -3.0
    train_snr_high: float = 12.0

    # channel / attack
    snr_db: float = 9.0
    attack_noise_power: float = 0.0
    pgd_gamma: float = 8.0 / 256.0
    pgd_iterations: int = 10
    pgd_step: float = (8.0 / 256.0) / 4.0

    # classifier; the small subset plus frame-labeled mark-swapped copies
    # keep it leaning on the fragile frame features, the way standard-trained
    # full-scale models lean on non-robust ones
    classifier_epochs: int = 10
    classifier_hidden: int = 64
    classifier_subset: int = 128
    classifier_swap_fraction: float = 3.0  # swapped copies per original

    # denoiser
    zeta: float = 0.8
    iota_prime: float = 0.5
    batch_denoiser: int = 128
    epochs_denoiser: int = 200
    denoiser_subset: int = 128
    denoiser_hidden: int = 192

    # reward
    eta: float = 1.0
    eta1: float = -0.8
    eta2: float = -0.7
    eta3: float = -0.5

    # agent; the batch size doubles as the learning delay, so the first
    # post-warmup stretch still shows the untrained policy
    agent_epochs: int = 500
    agent_episodes: int = 3
    agent_buffer: int = 1_000_000
    agent_batch: int = 256
    agent_gamma: float = 0.6
    agent_tau: float = 0.01
    agent_lr_actor: float = 3e-4
    agent_lr_critic: float = 1e-3
    agent_optimizer: str = "adam"
    agent_hidden: int = 256
    agent_warmup: int = 150
    agent_noise_start: float = 0.4
    agent_noise_end: float = 0.05
    env_batch: int = 32

    def bounds(self) -> PlanBounds:
        b = PlanBounds(self.t_d_max, self.t_plus_max)
        b.check_schedule(self.schedule_steps)
        return b

    def attack(self) -> AttackConfig:
        return AttackConfig(self.pgd_gamma, self.pgd_iterations, self.pgd_step)

    def reward_config(self) -> RewardConfig:
        return RewardConfig(self.eta, self.eta1, self.eta2, self.eta3)

    def agent_hyper(self) -> DdpgHyper:
        return DdpgHyper(epochs=self.agent_epochs, episodes=self.agent_episodes,
                         buffer_capacity=self.agent_buffer, batch_size=self.agent_batch,
                         gamma=self.agent_gamma, tau=self.agent_tau,
                         lr_actor=self.agent_lr_actor, lr_critic=self.agent_lr_critic,
                         optimizer=self.agent_optimizer, hidden=self.agent_hidden,
                         warmup_random=self.agent_warmup,
                         noise_sigma_start=self.agent_noise_start,
                         noise_sigma_end=self.agent_noise_end,
                         bounds=self.bounds())


_CONFIG_KEYS = {
    "seed": ("seed", int),
    "out_dir": ("out_dir", str),
    "data.height": ("image_height", int),
    "data.width": ("image_width", int),
    "data.classes": ("n_classes", int),
    "data.n_train": ("n_train", int),
    "data.n_eval": ("n_eval", int),
    "schedule.steps": ("schedule_steps", int),
    "schedule.beta_start": ("beta_start", float),
    "schedule.beta_end": ("beta_end", float),
    "plan.t_d_max": ("t_d_max", int),
    "plan.t_plus_max": ("t_plus_max", int),
    "codec.embed_dim": ("embed_dim", int),
    "codec.symbol_dim": ("symbol_dim", int),
    "codec.iota": ("iota", float),
    "codec.batch_semantic": ("batch_semantic", int),
    "codec.batch_jsc": ("batch_jsc", int),
    "codec.epochs_semantic": ("epochs_semantic", int),
    "codec.epochs_jsc": ("epochs_jsc", int),
    "codec.epochs_joint": ("epochs_joint", int),
    "channel.snr_db": ("snr_db", float),
    "channel.attack_noise_power": ("attack_noise_power", float),
    "attack.gamma": ("pgd_gamma", float),
    "attack.iterations": ("pgd_iterations", int),
    "attack.step": ("pgd_step", float),
    "classifier.epochs": ("classifier_epochs", int),
    "classifier.hidden": ("classifier_hidden", int),
    "classifier.subset": ("classifier_subset", int),
    "denoiser.zeta": ("zeta", float),
    "denoiser.iota_prime": ("iota_prime", float),
    "denoiser.batch": ("batch_denoiser", int),
    "denoiser.epochs": ("epochs_denoiser", int),
    "denoiser.hidden": ("denoiser_hidden", int),
    "reward.eta": ("eta", float),
    "reward.eta1": ("eta1", float),
    "reward.eta2": ("eta2", float),
    "reward.eta3": ("eta3", float),
    "agent.epochs": ("agent_epochs", int),
    "agent.episodes": ("agent_episodes", int),
    "agent.buffer": ("agent_buffer", int),
    "agent.batch": ("agent_batch", int),
    "agent.gamma": ("agent_gamma", float),
    "agent.tau": ("agent_tau", float),
    "agent.lr_actor": ("agent_lr_actor", float),
    "agent.lr_critic": ("agent_lr_critic", float),
    "agent.optimizer": ("agent_optimizer", str),
    "agent.hidden": ("agent_hidden", int),
    "agent.warmup": ("agent_warmup", int),
    "agent.env_batch": ("env_batch", int),
}


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Flat key=value file with section prefixes, e.g. `agent.tau=0.005`."""
    cfg = base or ExperimentConfig()
    updates = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            attr, cast = _CONFIG_KEYS[key]
            try:
                updates[attr] = cast(value)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return replace(cfg, **updates)


def resolve_out_dir(cfg: ExperimentConfig) -> Path:
    out = os.environ.get("DIFFUSEC_OUT", cfg.out_dir)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# The end-to-end pipeline


@dataclass
class Pipeline:
    """Frozen components plus the knobs step_env and the sweeps need."""

    codec: Codec
    denoiser: Denoiser
    classifier: Classifier | None
    schedule: NoiseSchedule
    bounds: PlanBounds
    attack: AttackConfig | None
    reward_cfg: RewardConfig
    attack_noise_power: float = 0.0
    clamp_images: bool = True

    def run(self, images: np.ndarray, labels: np.ndarray, plan: TimestepPlan,
            snr_db: float, rng: Rng) -> BatchOutcome:
        channel = ChannelConfig(snr_db, self.attack_noise_power)
        return run_pipeline((images, labels), plan, self, channel, rng)


def run_pipeline(batch: tuple[np.ndarray, np.ndarray], plan: TimestepPlan,
                 components: Pipeline, channel: ChannelConfig,
                 rng: Rng) -> BatchOutcome:
    """attack -> diffuse -> encode -> channel -> decode -> purify -> outcome."""
    images, labels = batch
    images = np.asarray(images, dtype=np.float32)
    if components.attack is not None and components.attack.gamma > 0:
        if components.classifier is None:
            raise ConfigError("an attack needs a classifier to attack")
        x_adv = pgd_attack(images, labels, components.classifier,
                           components.attack, rng)
    else:
        x_adv = images.copy()
    x_dif = diffuse(x_adv, plan.t_d, components.schedule, rng)
    z_hat = pass_channel(components.codec, x_dif, channel, rng)
    x_rx = decode(components.codec, z_hat)
    x_final = purify(x_rx, plan, components.denoiser, components.schedule, rng,
                     clamp=components.clamp_images)
    return BatchOutcome(x=images, x_adv=x_adv, x_final=x_final,
                        classifier=components.classifier)


def pass_channel(codec: Codec, images: np.ndarray, channel: ChannelConfig,
                 rng: Rng) -> np.ndarray:
    return transmit(encode(codec, images), channel, rng)


def robust_accuracy(outcome: BatchOutcome, labels: np.ndarray) -> float:
    """Fraction of attacked images whose final classification is the label."""
    final = np.atleast_1d(classify(outcome.classifier, outcome.x_final))
    return float(np.mean(final == labels))


def outcome_row(outcome: BatchOutcome, cfg: RewardConfig, plan: TimestepPlan,
                snr_db: float, step: int = 0) -> dict:
    return {"step": step, "snr_db": snr_db, "t_d": plan.t_d, "t_plus": plan.t_plus,
            "ssim_avg": ssim_avg(outcome.x, outcome.x_final),
            "adv_rate": adv_rate(outcome), "err_rate": err_rate(outcome),
            "reward": reward(outcome, cfg)}


# ---------------------------------------------------------------------------
# Agent environment over the pipeline


class PipelineEnv:
    """Training environment: fresh batch per step, SNR redrawn per reset."""

    def __init__(self, pipeline: Pipeline, data: ToyDataset, env_batch: int = 32,
                 snr_set: tuple = TRAIN_SNRS_DB):
        if pipeline.classifier is None:
            raise ConfigError("the training environment needs a classifier")
        self.pipeline = pipeline
        self.data = data
        self.env_batch = env_batch
        self.snr_set = snr_set

    def reset(self, rng: Rng) -> AgentState:
        snr = float(self.snr_set[int(rng.integers(len(self.snr_set)))])
        return random_state(snr, rng, self.pipeline.bounds)

    def step(self, s: AgentState, a, rng: Rng):
        idx = rng.choice(self.data.images.shape[0], size=self.env_batch, replace=False)
        return step_env_detailed(s, a, self.pipeline, self.data.batch(idx), rng)


# ---------------------------------------------------------------------------
# SNR sweeps


@dataclass
class SweepRow:
    snr_db: float
    robust_accuracy: float
    clean_accuracy: float
    ssim_avg: float
    t_d: int
    t_plus: int
    mean_reward: float


@dataclass
class SweepResult:
    mode: str
    rows: list[SweepRow] = field(default_factory=list)


def _evaluate_plan(pipeline: Pipeline, batch, plan: TimestepPlan, snr_db: float,
                   rng: Rng) -> tuple[float, float, float]:
    images, labels = batch
    outcome = pipeline.run(images, labels, plan, snr_db, rng)
    return (robust_accuracy(outcome, labels),
            ssim_avg(outcome.x, outcome.x_final),
            reward(outcome, pipeline.reward_cfg))


def _clean_accuracy(pipeline: Pipeline, batch, plan: TimestepPlan, snr_db: float,
                    rng: Rng) -> float:
    images, labels = batch
    quiet = replace(pipeline, attack=None)
    outcome = quiet.run(images, labels, plan, snr_db, rng)
    return float(np.mean(np.atleast_1d(classify(pipeline.classifier, outcome.x_final)) == labels))


def sweep_snr(snr_list, mode: str, pipeline: Pipeline, batch,
              rng: Rng, steps_per_snr: int = 3, nets: DdpgNets | None = None,
              fixed_plan: tuple[int, int] = (20, 0)) -> SweepResult:
    """Evaluate each SNR either with the adaptive policy (random plan, then
    steps_per_snr greedy moves, metrics averaged over the visited plans) or
    at a fixed plan evaluated the same number of times."""
    if mode not in ("adaptive", "fixed"):
        raise ConfigError(f"unknown sweep mode {mode!r}")
    if mode == "adaptive" and nets is None:
        raise ConfigError("adaptive sweep needs trained agent nets")
    result = SweepResult(mode=mode)
    for snr_db in snr_list:
        snr_db = float(snr_db)
        accs, ssims, rewards = [], [], []
        if mode == "adaptive":
            s = random_state(snr_db, rng, pipeline.bounds)
            for _ in range(steps_per_snr):
                a = act(s, nets, 0.0, rng, ACTION_SCALE, pipeline.bounds)
                t_d, t_plus = apply_action(s, a, pipeline.bounds)
                s = AgentState(t_d, t_plus, snr_db)
                plan = TimestepPlan(t_d, t_plus, pipeline.bounds)
                acc, sim, rew = _evaluate_plan(pipeline, batch, plan, snr_db, rng)
                accs.append(acc)
                ssims.append(sim)
                rewards.append(rew)
            final_plan = TimestepPlan(s.t_d, s.t_plus, pipeline.bounds)
        else:
            final_plan = TimestepPlan(fixed_plan[0], fixed_plan[1], pipeline.bounds)
            for _ in range(steps_per_snr):
                acc, sim, rew = _evaluate_plan(pipeline, batch, final_plan, snr_db, rng)
                accs.append(acc)
                ssims.append(sim)
                rewards.append(rew)
        clean = _clean_accuracy(pipeline, batch, final_plan, snr_db, rng)
        result.rows.append(SweepRow(
            snr_db=snr_db, robust_accuracy=float(np.mean(accs)),
            clean_accuracy=clean, ssim_avg=float(np.mean(ssims)),
            t_d=final_plan.t_d, t_plus=final_plan.t_plus,
            mean_reward=float(np.mean(rewards))))
    return result


# ---------------------------------------------------------------------------
# Training orchestration


@dataclass
class TrainedStack:
    cfg: ExperimentConfig
    train_data: ToyDataset
    eval_data: ToyDataset
    schedule: NoiseSchedule
    codec: Codec
    codec_report: TrainReport
    classifier: Classifier
    classifier_accuracy: float
    denoiser: Denoiser
    denoiser_losses: list[float]

    def pipeline(self, with_attack: bool = True, clamp: bool = True) -> Pipeline:
        return Pipeline(codec=self.codec, denoiser=self.denoiser,
                        classifier=self.classifier, schedule=self.schedule,
                        bounds=self.cfg.bounds(),
                        attack=self.cfg.attack() if with_attack else None,
                        reward_cfg=self.cfg.reward_config(),
                        attack_noise_power=self.cfg.attack_noise_power,
                        clamp_images=clamp)


def train_stack(cfg: ExperimentConfig) -> TrainedStack:
    """Dataset plus the three frozen components, all from cfg.seed."""
    master = make_rng(cfg.seed)
    r_data, r_codec, r_clf, r_den = split_rng(master, 4)
    n_total = cfg.n_train + cfg.n_eval
    data = make_toy_dataset(n_total, r_data, cfg.image_height, cfg.image_width,
                            cfg.n_classes)
    train = ToyDataset(data.images[:cfg.n_train], data.labels[:cfg.n_train],
                       data.height, data.width, data.n_classes)
    holdout = ToyDataset(data.images[cfg.n_train:], data.labels[cfg.n_train:],
                         data.height, data.width, data.n_classes)

    schedule = build_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end)
    bounds = cfg.bounds()

    codec = init_codec(train.images.shape[1], cfg.embed_dim, cfg.symbol_dim, r_codec)
    # the codec must transport images as they come, not re-impose the frame
    # patterns of its training classes, so its whole diet wears random frame
    # textures; and since the deployed encoder always sees diffused images,
    # the joint phase adds lightly diffused copies
    codec_images = np.concatenate([randomize_frames(train, r_codec),
                                   randomize_frames(train, r_codec)])
    train_semantic(codec_images, codec, cfg.iota, cfg.epochs_semantic, r_codec,
                   batch_size=cfg.batch_semantic)
    embeddings = forward(codec.semantic_encoder, codec_images)
    train_jsc(embeddings, codec, ChannelConfig(cfg.snr_db), cfg.epochs_jsc, r_codec,
              batch_size=cfg.batch_jsc,
              snr_range=(cfg.train_snr_low, cfg.train_snr_high))
    aug = [codec_images]
    for t_aug in (5, 12, 20):
        pick = r_codec.choice(codec_images.shape[0], cfg.n_train // 3, replace=False)
        aug.append(diffuse(codec_images[pick], t_aug, schedule, r_codec))
    report = train_joint(np.concatenate(aug), holdout.images, codec,
                         ChannelConfig(cfg.snr_db), cfg.iota, cfg.epochs_joint,
                         r_codec, batch_size=cfg.batch_semantic,
                         snr_range=(cfg.train_snr_low, cfg.train_snr_high))

    clf_base = ToyDataset(train.images[:cfg.classifier_subset],
                          train.labels[:cfg.classifier_subset],
                          train.height, train.width, train.n_classes)
    clf_images, clf_labels = [clf_base.images], [clf_base.labels]
    for _ in range(int(round(cfg.classifier_swap_fraction))):
        swapped_images, frame_labels = swap_marks(clf_base, r_clf)
        clf_images.append(swapped_images)
        clf_labels.append(frame_labels)
    classifier, _ = train_classifier(
        np.concatenate(clf_images), np.concatenate(clf_labels), cfg.n_classes,
        cfg.classifier_epochs, r_clf,
        hidden=(cfg.classifier_hidden, cfg.classifier_hidden))
    clf_acc = float(np.mean(np.atleast_1d(classify(classifier, train.images))
                            == train.labels))

    subset = train.images[:cfg.denoiser_subset]
    sampler = uniform_plan_sampler((5, 30), (0, 10), bounds)
    denoiser, den_losses = train_denoiser(
        subset, codec, ChannelConfig(cfg.snr_db), sampler,
        DenoiserLoss(cfg.zeta, cfg.iota_prime), cfg.epochs_denoiser, r_den,
        schedule, hidden=(cfg.denoiser_hidden, cfg.denoiser_hidden),
        batch_size=cfg.batch_denoiser)

    return TrainedStack(cfg=cfg, train_data=train, eval_data=holdout,
                        schedule=schedule, codec=codec, codec_report=report,
                        classifier=classifier, classifier_accuracy=clf_acc,
                        denoiser=denoiser, denoiser_losses=den_losses)


def train_stack_agent(stack: TrainedStack, seed_offset: int = 1) -> tuple[DdpgNets, list[dict]]:
    """Train the step-selection agent on the frozen stack."""
    rng = make_rng(stack.cfg.seed + seed_offset)
    env = PipelineEnv(stack.pipeline(), stack.train_data, stack.cfg.env_batch)
    return train_agent(env, stack.cfg.agent_hyper(), rng)


# ---------------------------------------------------------------------------
# Persistence helpers


def append_csv(path, rows: list[dict], header: list[str]) -> None:
    """Single-writer CSV append; the header is written once on creation."""
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=header, extrasaction="ignore")
        if fresh:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_sweep_csv(path, result: SweepResult) -> None:
    rows = [{"snr_db": r.snr_db, "robust_accuracy": r.robust_accuracy,
             "clean_accuracy": r.clean_accuracy, "ssim_avg": r.ssim_avg,
             "t_d": r.t_d, "t_plus": r.t_plus, "mean_reward": r.mean_reward}
            for r in result.rows]
    append_csv(path, rows, SWEEP_HEADER)


def dump_gallery(out_dir, tag: str, outcome: BatchOutcome, height: int,
                 width: int, count: int = 4) -> list[Path]:
    """Write a few original/attacked/final triples as DTNS images."""
    out_dir = Path(out_dir) / "gallery"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    count = min(count, outcome.x.shape[0])
    for name, batch in (("original", outcome.x), ("adversarial", outcome.x_adv),
                        ("final", outcome.x_final)):
        for i in range(count):
            path = out_dir / f"{tag}_{name}_{i}.dtns"
            save_tensor(path, batch[i].reshape(height, width))
            written.append(path)
    return written
