"""Training loops for baseline, finetune, few_mix and few_max adaptation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ._random import make_rng, rng_from_json, rng_state_to_json
from .augment import AugPolicy, blend_plan, mri_augment
from .errors import CheckpointError, CheckpointVersionError, ConfigError, DivergenceError, ParameterError
from .loss import TAU, LossBreakdown, NegativePolicy, fewmax_loss
from .nets import ArchConfig, NetworkHandle, build_net, reinit_head

log = logging.getLogger(__name__)

METHODS = ("baseline", "finetune", "few_mix", "few_max")
ANCHORED = ("few_mix", "few_max")
LOSS_GUARD = 50.0
CHECKPOINT_FORMAT = "fewmax-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.125
    momentum: float = 0.9
    weight_decay: float = 0.9e-4
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("batch_size must be positive and epochs non-negative")


@dataclass
class TrainState:
    task_net: NetworkHandle
    anchor_net: Optional[NetworkHandle]
    rng: np.random.Generator
    epoch: int = 0
    metric_log: list = field(default_factory=list)
    optimizer: Optional[torch.optim.Optimizer] = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.anchor_net is not None and not self.anchor_net.frozen:
            self.anchor_net.freeze()


def make_state(task_net, anchor_net, seed, config=None):
    return TrainState(task_net=task_net, anchor_net=anchor_net, rng=make_rng(seed, 0x7A1B), config=config or {})


def _sync_optimizer(state: TrainState, optim: OptimConfig):
    state.task_net.check_trainable()
    if state.optimizer is None:
        state.optimizer = torch.optim.SGD(
            state.task_net.net.parameters(), lr=optim.lr, momentum=optim.momentum, weight_decay=optim.weight_decay
        )
    for group in state.optimizer.param_groups:
        group.update(lr=optim.lr, momentum=optim.momentum, weight_decay=optim.weight_decay)
    return state.optimizer


def mix_batch(x, partners, keep):
    """Differentiable CutMix of a batch.

    ``x`` is ``(B, C, H, W)``; ``partners`` ``(B, M)``; ``keep`` ``(B, M, H, W)``
    boolean.  Returns blends shaped ``(B, M, C, H, W)``.
    """
    partners = torch.as_tensor(partners, dtype=torch.long, device=x.device)
    keep = torch.as_tensor(keep, dtype=torch.bool, device=x.device)[:, :, None]
    return torch.where(keep, x[:, None], x[partners])


def batch_loss(task_net, anchor_net, x, partners, lams, keep, tau=TAU, negatives=None) -> LossBreakdown:
    """Composite loss for one batch given a blend plan; ``anchor_net=None`` drops the anchor term."""
    B, M = partners.shape
    xhat = mix_batch(x, partners, keep)
    z = task_net(x)
    zhat = task_net(xhat.reshape(B * M, *x.shape[1:])).reshape(B, M, -1)
    za = None
    if anchor_net is not None:
        with torch.no_grad():
            za = anchor_net(x)
    return fewmax_loss(z, za, zhat, partners, lams, tau, negatives)


def method_policy(method, policy: AugPolicy) -> AugPolicy:
    """Blend policy actually used by ``method``; only few_max keeps ``policy.M``."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "few_max":
        return policy
    return dataclasses.replace(policy, M=1)


def train_epoch(
    state: TrainState,
    data,
    policy: AugPolicy,
    optim: OptimConfig,
    method: str,
    tau: float = TAU,
    negatives: Optional[NegativePolicy] = None,
) -> TrainState:
    """One pass over ``data`` with one SGD step per full batch.

    Trailing samples that do not fill a batch are skipped for this epoch;
    the shuffle changes every epoch so no sample is systematically dropped.
    """
    n = len(data)
    if n == 0:
        raise ConfigError("training data is empty")
    if optim.batch_size > n:
        raise ConfigError(f"batch_size {optim.batch_size} exceeds dataset size {n}")
    eff_policy = method_policy(method, policy)
    if method in ANCHORED and state.anchor_net is None:
        raise ConfigError(f"method {method!r} requires an anchor network")
    anchor = state.anchor_net.net if method in ANCHORED else None

    opt = _sync_optimizer(state, optim)
    net = state.task_net.net
    net.train()
    rng = state.rng
    t0 = time.perf_counter()

    perm = rng.permutation(n)
    batch_losses, l_cls, l_tasks = [], [], []
    for b in range(n // optim.batch_size):
        recs = [data[k] for k in perm[b * optim.batch_size : (b + 1) * optim.batch_size]]
        if policy.complex_aug:
            recs = [mri_augment(r, policy, rng) for r in recs]
        arrays = [r.tensor for r in recs]
        partners, lams, keep = blend_plan(arrays, eff_policy, rng)
        x = state.task_net.to_tensor(np.stack(arrays).transpose(0, 3, 1, 2))

        bd = batch_loss(net, anchor, x, partners, lams, keep, tau, negatives)
        summary = bd.summary()
        if not math.isfinite(summary["loss"]) or summary["loss"] > LOSS_GUARD:
            raise DivergenceError(
                f"loss diverged at epoch {state.epoch} batch {b}: {summary}", batch_index=b, components=summary
            )
        opt.zero_grad(set_to_none=True)
        bd.total.backward()
        opt.step()
        batch_losses.append(summary["loss"])
        l_cls.append(summary["l_cl"])
        l_tasks.append(summary["l_task_selected"])

    state.epoch += 1
    state.metric_log.append(
        {
            "epoch": state.epoch,
            "method": method,
            "mean_loss": float(np.mean(batch_losses)),
            "mean_l_cl": float(np.mean(l_cls)),
            "mean_l_task_selected": float(np.mean(l_tasks)),
            "wall_time": time.perf_counter() - t0,
            "batch_losses": batch_losses,
        }
    )
    log.debug("epoch %d %s loss %.4f", state.epoch, method, state.metric_log[-1]["mean_loss"])
    return state


def comparable_log(metric_log):
    """Metric records without wall-clock timings, for determinism comparisons."""
    return [{k: v for k, v in rec.items() if k != "wall_time"} for rec in metric_log]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _pack(prefix, state_dict):
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in state_dict.items()}


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _pack("task", state.task_net.net.state_dict())
    if state.anchor_net is not None:
        arrays.update(_pack("anchor", state.anchor_net.net.state_dict()))
    if state.optimizer is not None:
        names = {id(p): k for k, p in state.task_net.net.named_parameters()}
        for group in state.optimizer.param_groups:
            for p in group["params"]:
                buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    arrays[f"momentum/{names[id(p)]}"] = buf.detach().cpu().numpy()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": state.task_net.arch.to_dict(),
        "epoch": state.epoch,
        "rng": rng_state_to_json(state.rng),
        "metric_log": state.metric_log,
        "config": state.config,
    }
    arrays["__meta__"] = np.array(json.dumps(meta))
    # write through a file handle so numpy does not append ".npz"
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def _read_archive(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
        meta = json.loads(str(arrays.pop("__meta__")))
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a fewmax checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path} has checkpoint version {meta.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    return arrays, meta


def _network_from(arrays, prefix, arch: ArchConfig, head_seed=None) -> NetworkHandle:
    net = build_net(arch, seed=0)
    state = {k[len(prefix) + 1 :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix + "/")}
    if not state:
        raise CheckpointError(f"checkpoint has no {prefix!r} parameters")
    has_head = any(k.startswith("head.") for k in state)
    if not has_head:
        if head_seed is None:
            raise CheckpointError("checkpoint lacks a projection head and no head seed was given")
        reinit_head(net, arch, head_seed)
        state.update({f"head.{k}": v for k, v in net.head.state_dict().items()})
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"architecture mismatch: {exc}") from exc
    return NetworkHandle(net, arch)


def load_network(path, which="task", head_seed=None) -> NetworkHandle:
    """Load one network from a checkpoint, e.g. a pretrained anchor.

    A checkpoint without head parameters (a classifier-pretrained trunk) gets
    a head initialized from ``head_seed``.
    """
    arrays, meta = _read_archive(path)
    return _network_from(arrays, which, ArchConfig(**meta["arch"]), head_seed)


def load_checkpoint(path) -> TrainState:
    arrays, meta = _read_archive(path)
    arch = ArchConfig(**meta["arch"])
    task = _network_from(arrays, "task", arch)
    anchor = None
    if any(k.startswith("anchor/") for k in arrays):
        anchor = _network_from(arrays, "anchor", arch).freeze()
    state = TrainState(
        task_net=task,
        anchor_net=anchor,
        rng=rng_from_json(meta["rng"]),
        epoch=meta["epoch"],
        metric_log=meta["metric_log"],
        config=meta["config"],
    )
    momentum = {k[len("momentum/") :]: v for k, v in arrays.items() if k.startswith("momentum/")}
    if momentum:
        state.optimizer = torch.optim.SGD(task.net.parameters(), lr=0.0, momentum=0.5)
        for name, p in task.net.named_parameters():
            if name in momentum:
                state.optimizer.state[p]["momentum_buffer"] = torch.from_numpy(momentum[name]).to(p.dtype)
    return state


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


def fit(state: TrainState, data, policy, optim: OptimConfig, method, tau=TAU, negatives=None, on_epoch=None):
    """Run epochs until ``state.epoch == optim.epochs``."""
    while state.epoch < optim.epochs:
        train_epoch(state, data, policy, optim, method, tau, negatives)
        if on_epoch is not None:
            on_epoch(state)
    return state


def prepare_training_data(config):
    """Few-shot, label-stripped (and optionally normalized) training records plus stats."""
    from .data import FewShotSpec, channel_stats, load_dataset, normalize, subset_few_shot

    if not config.data.target_manifest:
        raise ConfigError("data.target_manifest is required")
    records = load_dataset(config.data.target_manifest)
    if config.data.class_ids:
        spec = FewShotSpec(tuple(config.data.class_ids), config.data.per_class, config.data.few_shot_seed)
        records = subset_few_shot(records, spec)
    records = [r.without_label() for r in records]
    stats = None
    if config.data.normalize:
        mean, std = channel_stats(records)
        stats = {"mean": mean.tolist(), "std": std.tolist()}
        records = [normalize(r, mean, std) for r in records]
    return records, stats


def initial_state(config) -> TrainState:
    """Random init for baseline; a copy of the frozen anchor otherwise."""
    from .nets import init_from_anchor, random_network

    if config.method == "baseline":
        return make_state(random_network(config.arch(), config.seed), None, config.seed)
    if not config.anchor:
        raise ConfigError(f"method {config.method!r} needs an anchor checkpoint (config key 'anchor')")
    if not Path(config.anchor).is_file():
        raise ConfigError(f"anchor checkpoint not found: {config.anchor}")
    anchor = load_network(config.anchor, "task", head_seed=config.seed).freeze()
    if anchor.arch != config.arch():
        log.warning("anchor architecture %s overrides configured %s", anchor.arch, config.arch())
    return make_state(init_from_anchor(anchor, config.seed), anchor, config.seed)


def write_metrics(metric_log, path):
    path = Path(path)
    path.write_text("".join(json.dumps(rec) + "\n" for rec in metric_log))
    return path


def run_training(config, resume_from=None, run_dir=None):
    """Train per ``config``; returns ``(state, metrics_path)``.

    Everything lands in the run directory: ``config.yaml``, ``metrics.jsonl``,
    ``checkpoints/epoch_XXXX.npz`` and ``checkpoints/final.npz``.
    """
    from .config import write_snapshot

    config.validate()
    run_dir = Path(run_dir or config.run_dir(f"{config.method}_seed{config.seed}"))
    write_snapshot(config, run_dir)
    records, stats = prepare_training_data(config)
    policy, optim = config.aug_policy(), config.optim_config()

    if resume_from is not None:
        state = load_checkpoint(resume_from)
    else:
        state = initial_state(config)
    in_ch = records[0].shape[-1]
    if state.task_net.arch.in_channels != in_ch:
        raise ConfigError(f"network expects {state.task_net.arch.in_channels} channels, data has {in_ch}")
    state.config = {"experiment": config.to_dict(), "norm_stats": stats}

    ckpt_dir = run_dir / "checkpoints"
    metrics_path = run_dir / "metrics.jsonl"
    write_metrics(state.metric_log, metrics_path)

    def on_epoch(st):
        write_metrics(st.metric_log, metrics_path)
        if config.checkpoint_every and st.epoch % config.checkpoint_every == 0:
            save_checkpoint(st, ckpt_dir / f"epoch_{st.epoch:04d}.npz")

    fit(state, records, policy, optim, config.method, config.tau, config.negatives(), on_epoch)
    save_checkpoint(state, ckpt_dir / "final.npz")
    return state, metrics_path
