"""Desk-scale simulator of a diffusion-purified semantic communication link.

Sender-side diffusing drowns adversarial perturbations, a trained joint
semantic-channel codec carries the image across an AWGN channel (with
optional channel attacks), the receiver runs extra reverse steps to absorb
what the channel added, and a DDPG agent picks the step counts per channel
condition. A small handshake keeps both ends on the same timestep plan.
"""

from .agent import (AgentAction, AgentState, DdpgHyper, DdpgNets, ReplayBuffer,
                    Transition, act, apply_action, greedy_rollout, random_state,
                    soft_update, step_env, td_target, train_agent,
                    update_actor, update_critic)
from .channel import (AttackConfig, ChannelConfig, Classifier, classify,
                      pgd_attack, snr_to_sigma, train_classifier, transmit)
from .codec import (Codec, TrainReport, decode, encode, init_codec,
                    load_codec, measure_codec_gain, save_codec, train_joint,
                    train_jsc, train_semantic)
from .ddpm import (Denoiser, DenoiserLoss, NoiseSchedule, PlanBounds,
                   TimestepPlan, build_schedule, diffuse, load_denoiser,
                   oracle_denoiser, purify, reverse_step, save_denoiser,
                   train_denoiser, uniform_plan_sampler)
from .errors import (ConfigError, ConstraintError, DataError, DiffusecError,
                     DivergenceError, FrameError, HandshakeError,
                     IncompleteFrameError, MeasurementError, PlanError,
                     ProtocolError, ShapeError, TimestepError,
                     UnsupportedMessageError)
from .harness import (ExperimentConfig, Pipeline, PipelineEnv, SweepResult,
                      ToyDataset, load_config, make_toy_dataset, run_pipeline,
                      sweep_snr, train_stack, train_stack_agent)
from .metrics import (BatchOutcome, RewardConfig, adv_rate, err_rate, reward,
                      ssim_avg)
from .nn import (DenseLayer, DenseNet, GradientSet, OptimizerState,
                 apply_update, backprop, build_net, forward, load_net,
                 make_optimizer, save_net)
from .sync import (Ack, Probe, SyncSession, TimestepAssign, decode_message,
                   encode_message, measure_snr, run_handshake)
from .tensor import (Rng, SsimParams, clamp01, gaussian_sample, load_tensor,
                     make_rng, save_tensor, ssim, split_rng)

__version__ = "0.1.0"
