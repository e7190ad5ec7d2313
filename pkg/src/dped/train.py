"""Adversarial training loop: discriminator pretraining, alternating
generator/discriminator Adam updates, NDJSON logging, and resumable
deterministic checkpoints.

Loss profiles select which terms drive the generator:

  full             content + 0.4 texture + 0.1 color + 400 tv
  content_texture  content + 0.4 texture + 400 tv
  mse_texture      mse + 0.4 texture + 400 tv
  mse              mse only

For the two mse profiles the pixelwise MSE takes the content slot in the
loss breakdown and the training log; the color column stays 0.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container, losses, nets
from .align import PatchPack
from .errors import EmptyDataset, IoError, NonFiniteComponent, NonFiniteGradient, NonFiniteLoss, ShapeError
from .losses import LossBreakdown, LossWeights

PROFILES = ("full", "content_texture", "mse_texture", "mse")

# component activation per profile
_ACTIVE = {
    "full": {"content", "texture", "color", "tv"},
    "content_texture": {"content", "texture", "tv"},
    "mse_texture": {"mse", "texture", "tv"},
    "mse": {"mse"},
}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    iterations: int = 20000
    lr: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_iters: int = 2000
    loss_weights: LossWeights = LossWeights()
    content_layer: str = "relu5_4"
    seed: int = 0
    checkpoint_every: int = 1000
    loss_profile: str = "full"
    generator_channels: int = 64
    disc_config: nets.DiscriminatorConfig = nets.DiscriminatorConfig()
    d_steps_per_g: int = 1

    def validate(self) -> None:
        if self.batch_size < 1 or self.iterations < 1 or self.lr <= 0:
            raise ValueError("batch_size, iterations must be >= 1 and lr > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.loss_profile not in PROFILES:
            raise ValueError(f"unknown loss profile {self.loss_profile!r}")

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def adam_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    m: list[torch.Tensor],
    v: list[torch.Tensor],
    t: int,
    cfg: TrainConfig,
) -> tuple[list[torch.Tensor], list[torch.Tensor], list[torch.Tensor]]:
    """One bias-corrected Adam update; pure function of its inputs.

    Returns (new_params, new_m, new_v).
    """
    if t < 1:
        raise ValueError("iteration t must be >= 1")
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.lr
    new_p, new_m, new_v = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("gradient contains NaN/Inf")
        mi = b1 * mi + (1 - b1) * g
        vi = b2 * vi + (1 - b2) * g * g
        m_hat = mi / (1 - b1**t)
        v_hat = vi / (1 - b2**t)
        new_p.append(p - lr * m_hat / (torch.sqrt(v_hat) + eps))
        new_m.append(mi)
        new_v.append(vi)
    return new_p, new_m, new_v


class _AdamState:
    """Per-network Adam moments plus its own step counter."""

    def __init__(self, module: torch.nn.Module):
        self.t = 0
        self.m = [torch.zeros_like(p) for p in module.parameters()]
        self.v = [torch.zeros_like(p) for p in module.parameters()]

    def update(self, module: torch.nn.Module, grads: list[torch.Tensor], cfg: TrainConfig) -> None:
        self.t += 1
        params = list(module.parameters())
        new_p, self.m, self.v = adam_step(params, grads, self.m, self.v, self.t, cfg)
        with torch.no_grad():
            for p, np_ in zip(params, new_p):
                if not torch.isfinite(np_).all():
                    raise NonFiniteGradient("parameter update produced NaN/Inf")
                p.copy_(np_)


@dataclass
class TrainState:
    gen: nets.Generator
    disc: nets.Discriminator
    adam_gen: _AdamState
    adam_disc: _AdamState
    rng: np.random.Generator
    iteration: int = 0
    counters: dict = field(default_factory=lambda: {k: 0 for k in ("content", "texture", "color", "tv", "mse")})


def init_state(cfg: TrainConfig) -> TrainState:
    gen = nets.generator_init(cfg.seed, cfg.generator_channels)
    disc = nets.discriminator_init(cfg.seed + 1, cfg.disc_config)
    return TrainState(
        gen=gen,
        disc=disc,
        adam_gen=_AdamState(gen),
        adam_disc=_AdamState(disc),
        rng=np.random.default_rng(cfg.seed),
    )


def _to_batch(pairs: list[tuple[np.ndarray, np.ndarray]]) -> tuple[torch.Tensor, torch.Tensor]:
    src = torch.from_numpy(np.stack([p[0] for p in pairs])).float()
    dst = torch.from_numpy(np.stack([p[1] for p in pairs])).float()
    return src, dst


def _grads(loss: torch.Tensor, module: torch.nn.Module) -> list[torch.Tensor]:
    return list(torch.autograd.grad(loss, list(module.parameters()), allow_unused=False))


def _d_accuracy(disc: nets.Discriminator, fake_gray: torch.Tensor, real_gray: torch.Tensor) -> float:
    with torch.no_grad():
        pf = nets.discriminator_forward(disc, fake_gray, "infer")
        pr = nets.discriminator_forward(disc, real_gray, "infer")
    return float(((pr > 0.5).sum() + (pf <= 0.5).sum()) / (len(pf) + len(pr)))


def pretrain_discriminator(
    data: list[tuple[np.ndarray, np.ndarray]], cfg: TrainConfig, state: TrainState | None = None
) -> tuple[nets.Discriminator, float]:
    """Train D on grayscale phone patches (fake) vs DSLR patches (real).

    Returns the discriminator and its final train-batch accuracy; with
    pretrain_iters == 0 the initialization is returned unchanged.
    """
    if not data:
        raise EmptyDataset("cannot pretrain on an empty dataset")
    if state is None:
        state = init_state(cfg)
    accuracy = 0.5
    for _ in range(cfg.pretrain_iters):
        idx = state.rng.integers(0, len(data), size=cfg.batch_size)
        src, dst = _to_batch([data[i] for i in idx])
        fake = losses.batch_grayscale(src)
        real = losses.batch_grayscale(dst)
        d_loss = losses.discriminator_loss(state.disc, fake, real)
        if not torch.isfinite(d_loss):
            raise NonFiniteLoss(f"discriminator pretraining loss diverged: {d_loss}")
        state.adam_disc.update(state.disc, _grads(d_loss, state.disc), cfg)
        accuracy = _d_accuracy(state.disc, fake, real)
    return state.disc, accuracy


def _generator_objective(
    state: TrainState,
    enhanced: torch.Tensor,
    dst: torch.Tensor,
    cfg: TrainConfig,
    vgg: nets.Vgg19Features | None,
    target_features: torch.Tensor | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    active = _ACTIVE[cfg.loss_profile]
    w = cfg.loss_weights
    content = texture = color = tv = 0.0
    if "content" in active:
        state.counters["content"] += 1
        if target_features is None:
            target_features = vgg(dst, cfg.content_layer)
        fe = vgg(enhanced, cfg.content_layer)
        volume = fe.shape[1] * fe.shape[2] * fe.shape[3]
        content = (fe - target_features).pow(2).flatten(1).sum(dim=1).mean() / volume
    if "mse" in active:
        state.counters["mse"] += 1
        content = losses.pixel_mse(enhanced, dst)
    if "texture" in active:
        state.counters["texture"] += 1
        texture = losses.texture_loss(state.disc, losses.batch_grayscale(enhanced))
    if "color" in active:
        state.counters["color"] += 1
        color = losses.color_loss(enhanced, dst)
    if "tv" in active:
        state.counters["tv"] += 1
        tv = losses.tv_loss(enhanced)
    # inactive terms enter with weight 0 and as plain floats: zero gradient
    eff = LossWeights(
        w_content=w.w_content if ("content" in active or "mse" in active) else 0.0,
        w_texture=w.w_texture if "texture" in active else 0.0,
        w_color=w.w_color if "color" in active else 0.0,
        w_tv=w.w_tv if "tv" in active else 0.0,
    )
    return losses.total_loss(content, texture, color, tv, eff)


def train_step(
    state: TrainState,
    batch: list[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    vgg: nets.Vgg19Features | None = None,
    target_features: torch.Tensor | None = None,
) -> tuple[LossBreakdown, float, float]:
    """One alternation: D update(s) on current generator outputs, then one
    generator update through the profile's objective.

    Returns (generator loss breakdown, discriminator loss, discriminator
    train-batch accuracy)."""
    if len(batch) != cfg.batch_size:
        raise ShapeError(f"batch size {len(batch)} != configured {cfg.batch_size}")
    src, dst = _to_batch(batch)
    state.gen.train(True)
    enhanced = state.gen(src)

    d_loss_val, d_acc = 0.0, float("nan")
    if "texture" in _ACTIVE[cfg.loss_profile]:
        fake = losses.batch_grayscale(enhanced).detach()
        real = losses.batch_grayscale(dst)
        for _ in range(cfg.d_steps_per_g):
            d_loss = losses.discriminator_loss(state.disc, fake, real)
            if not torch.isfinite(d_loss):
                raise NonFiniteLoss(f"discriminator loss diverged: {d_loss}")
            state.adam_disc.update(state.disc, _grads(d_loss, state.disc), cfg)
        d_loss_val = float(d_loss.detach())
        d_acc = _d_accuracy(state.disc, fake, real)

    try:
        total, breakdown = _generator_objective(state, enhanced, dst, cfg, vgg, target_features)
    except NonFiniteComponent as e:
        raise NonFiniteLoss(f"generator loss diverged: {e}") from e
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"generator loss diverged: {breakdown}")
    state.adam_gen.update(state.gen, _grads(total, state.gen), cfg)
    state.iteration += 1
    return breakdown, d_loss_val, d_acc


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    nets.weights_save(state.gen, path / "generator.dpedw")
    nets.weights_save(state.disc, path / "discriminator.dpedw")
    moments: dict[str, np.ndarray] = {}
    for prefix, adam in (("gen", state.adam_gen), ("disc", state.adam_disc)):
        moments[f"{prefix}.t"] = np.array([adam.t], dtype=np.float32)
        for i, (mi, vi) in enumerate(zip(adam.m, adam.v)):
            moments[f"{prefix}.m.{i}"] = mi.numpy()
            moments[f"{prefix}.v.{i}"] = vi.numpy()
    container.save_tensors(path / "moments.dpedw", "adam_moments", moments)
    with open(path / "rng_state.json", "w") as f:
        json.dump(state.rng.bit_generator.state, f)
    with open(path / "manifest.json", "w") as f:
        json.dump(
            {"iter": state.iteration, "config_hash": cfg.hash(), "seed": cfg.seed, "counters": state.counters},
            f,
        )


def load_checkpoint(path, cfg: TrainConfig) -> TrainState:
    path = Path(path)
    try:
        with open(path / "manifest.json") as f:
            manifest = json.load(f)
        with open(path / "rng_state.json") as f:
            rng_state = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e
    gen = nets.weights_load(path / "generator.dpedw", "generator")
    disc = nets.weights_load(path / "discriminator.dpedw", "discriminator")
    state = TrainState(
        gen=gen,
        disc=disc,
        adam_gen=_AdamState(gen),
        adam_disc=_AdamState(disc),
        rng=np.random.default_rng(),
        iteration=manifest["iter"],
        counters=manifest.get("counters", {k: 0 for k in ("content", "texture", "color", "tv", "mse")}),
    )
    state.rng.bit_generator.state = rng_state
    _, moments = container.load_tensors(path / "moments.dpedw", "adam_moments")
    for prefix, adam in (("gen", state.adam_gen), ("disc", state.adam_disc)):
        adam.t = int(moments[f"{prefix}.t"][0])
        for i in range(len(adam.m)):
            adam.m[i] = torch.from_numpy(moments[f"{prefix}.m.{i}"])
            adam.v[i] = torch.from_numpy(moments[f"{prefix}.v.{i}"])
    return state


@dataclass
class TrainResult:
    state: TrainState
    checkpoint_dir: Path
    log_path: Path


def load_split_pairs(pack: PatchPack, split: str = "train") -> list[tuple[np.ndarray, np.ndarray]]:
    ids = pack.pair_ids(split)
    if not ids:
        ids = pack.pair_ids("all")
    return [pack.load_pair(pid) for pid in ids]


def train(
    data: list[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    out_dir,
    vgg: nets.Vgg19Features | None = None,
    resume: str | Path | None = None,
    deterministic: bool = False,
    log_every: int = 1,
) -> TrainResult:
    """Pretrain D, then run the alternating optimization for cfg.iterations.

    Batches are sampled uniformly with replacement from `data`. Checkpoints
    land in <out_dir>/checkpoints/iter_NNNNNN; one NDJSON log row per
    iteration goes to <out_dir>/train_log.ndjson.
    """
    cfg.validate()
    if len(data) < 1:
        raise EmptyDataset("training requires at least one patch pair")
    if deterministic:
        torch.set_num_threads(1)
    needs_vgg = "content" in _ACTIVE[cfg.loss_profile]
    if needs_vgg and vgg is None:
        raise ValueError(f"loss profile {cfg.loss_profile!r} requires VGG weights")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_root = out / "checkpoints"

    if resume is not None:
        state = load_checkpoint(resume, cfg)
        log_mode = "a"
    else:
        state = init_state(cfg)
        log_mode = "w"
        if "texture" in _ACTIVE[cfg.loss_profile] and cfg.pretrain_iters > 0:
            pretrain_discriminator(data, cfg, state)

    # frozen VGG + fixed targets: cache target features for small datasets
    feature_cache: dict[tuple[int, ...], torch.Tensor] = {}
    use_cache = needs_vgg and len(data) <= 512

    last_path = ckpt_root / f"iter_{state.iteration:06d}"
    with open(out / "train_log.ndjson", log_mode) as log:
        while state.iteration < cfg.iterations:
            t0 = time.perf_counter()
            idx = state.rng.integers(0, len(data), size=cfg.batch_size)
            batch = [data[i] for i in idx]
            target_features = None
            if use_cache:
                for i in {int(i) for i in idx}:
                    if i not in feature_cache:
                        with torch.no_grad():
                            feature_cache[i] = vgg(
                                torch.from_numpy(data[i][1]).float().unsqueeze(0), cfg.content_layer
                            )
                target_features = torch.cat([feature_cache[int(i)] for i in idx])
            breakdown, d_loss, d_acc = train_step(state, batch, cfg, vgg, target_features)
            row = {
                "iter": state.iteration,
                "total": breakdown.total,
                "content": breakdown.content,
                "texture": breakdown.texture,
                "color": breakdown.color,
                "tv": breakdown.tv,
                "d_loss": d_loss,
                "d_acc": d_acc,
                "wallclock_ms": (time.perf_counter() - t0) * 1000.0,
            }
            if state.iteration % log_every == 0 or state.iteration == cfg.iterations:
                log.write(json.dumps(row) + "\n")
                log.flush()
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.iterations:
                last_path = ckpt_root / f"iter_{state.iteration:06d}"
                save_checkpoint(state, cfg, last_path)
    if not last_path.exists():
        save_checkpoint(state, cfg, last_path)
    return TrainResult(state=state, checkpoint_dir=last_path, log_path=out / "train_log.ndjson")
