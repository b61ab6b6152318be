"""Stage 2: conditional latent diffusion over the quantized motion codes.

The forward process corrupts clean latents Z0 with a closed-form Gaussian
jump. The denoiser is a transformer decoder that predicts Z0 directly from
(noisy latents, audio track, style vector, step index): the noisy-latent
embedding plus the style embedding forms the query stream, and the audio
embedding plus the step embedding forms the key/value stream. Motion-side
self-attention is causal with a per-head linear temporal penalty, and
cross-attention is pinned to the matching audio frame, so frame t of the
output never sees audio or latents beyond t.

Sampling walks the steps backwards: each iteration predicts Z0, then
re-noises it to the previous step through the forward-process posterior.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import container, nn
from .autodiff import Tensor
from .config import Stage2Config, build_dataclass, config_hash
from .motion import AudioFeatures, FaceTemplate, MotionSequence
from .motion_autoencoder import (
    DivergenceError,
    Stage1Checkpoint,
    decode,
    encode,
    quantize,
)
from .pyramid import MeshPyramid, pyramid_hash
from .rng import named_rng

BETA_MIN = 1e-4
BETA_MAX = 0.02
REFERENCE_STEPS = 1000


# ---------------------------------------------------------------------------
# noise schedule and forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise fractions; betas[i] is the step-(i+1) variance.

    alpha_bars has length N+1 so it can be indexed by the step number
    directly, with alpha_bars[0] = 1 (no noise applied yet).
    """

    betas: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("schedule needs at least one step")
        if betas[0] <= 0.0 or betas[-1] >= 1.0 or np.any(np.diff(betas) < 0):
            raise ValueError("betas must be nondecreasing within (0, 1)")
        object.__setattr__(self, "betas", betas)

    @property
    def n_steps(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.concatenate([[1.0], np.cumprod(self.alphas)])


def make_noise_schedule(n_steps: int, kind: str = "linear") -> NoiseSchedule:
    """Build an n-step schedule.

    "linear" spaces the base rates linearly over [1e-4, 0.02] and raises
    the per-step survival rate to the power 1000/n, so the total noise
    injected by step n matches the canonical 1000-step linear schedule no
    matter how few steps are used (at n=1000 the two kinds coincide).
    "linear-unscaled" keeps the base rates as-is, which leaves short
    schedules far from the standard normal.
    """
    if n_steps < 2:
        raise ValueError(f"schedule needs n_steps >= 2, got {n_steps}")
    base = np.linspace(BETA_MIN, BETA_MAX, n_steps)
    if kind == "linear":
        betas = 1.0 - (1.0 - base) ** (REFERENCE_STEPS / float(n_steps))
    elif kind == "linear-unscaled":
        betas = base
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(betas=betas, kind=kind)


def forward_diffuse(z0, n: int, schedule: NoiseSchedule, rng=None, noise=None):
    """Jump straight from Z0 to Z^n; returns (Z^n, the noise used)."""
    data = z0.data if hasattr(z0, "data") else np.asarray(z0, dtype=np.float64)
    if not 1 <= n <= schedule.n_steps:
        raise ValueError(f"step {n} outside [1, {schedule.n_steps}]")
    if noise is None:
        if rng is None:
            raise ValueError("forward_diffuse needs an rng when noise is not given")
        noise = rng.standard_normal(data.shape)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != data.shape:
            raise ValueError("noise shape must match the latents")
    a_bar = schedule.alpha_bars[n]
    return np.sqrt(a_bar) * data + np.sqrt(1.0 - a_bar) * noise, noise


def align_audio_to_motion(features: np.ndarray, t_motion: int) -> np.ndarray:
    """Linearly resample a (T_a, C_a) track to exactly t_motion frames.

    Equal lengths pass the input through untouched.
    """
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"features must be (T_a >= 1, C_a), got {features.shape}")
    if t_motion < 1:
        raise ValueError("t_motion must be >= 1")
    t_a = features.shape[0]
    if t_a == t_motion:
        return features
    src = np.arange(t_a, dtype=np.float64)
    dst = np.linspace(0.0, t_a - 1.0, t_motion)
    out = np.empty((t_motion, features.shape[1]), dtype=np.float64)
    for ch in range(features.shape[1]):
        out[:, ch] = np.interp(dst, src, features[:, ch].astype(np.float64))
    return out


# ---------------------------------------------------------------------------
# conditioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditioningBundle:
    """Audio track (T_a, C_a), convex style weights (S,), optional step."""

    audio: np.ndarray
    style: np.ndarray
    step: int | None = None

    def __post_init__(self):
        audio = np.asarray(self.audio, dtype=np.float64)
        style = np.asarray(self.style, dtype=np.float64)
        if audio.ndim != 2 or audio.shape[0] < 1:
            raise ValueError(f"audio must be (T_a >= 1, C_a), got {audio.shape}")
        if style.ndim != 1 or style.size < 1:
            raise ValueError("style must be a flat weight vector")
        if np.any(style < 0.0) or abs(style.sum() - 1.0) > 1e-9:
            raise ValueError("style weights must be >= 0 and sum to 1")
        if self.step is not None and self.step < 1:
            raise ValueError("step must be >= 1")
        object.__setattr__(self, "audio", audio)
        object.__setattr__(self, "style", style)

    def with_step(self, n: int) -> "ConditioningBundle":
        return replace(self, step=int(n))


def one_hot_style(index: int, n_subjects: int) -> np.ndarray:
    if not 0 <= index < n_subjects:
        raise ValueError(f"subject index {index} outside [0, {n_subjects})")
    style = np.zeros(n_subjects)
    style[index] = 1.0
    return style


# ---------------------------------------------------------------------------
# denoiser parameters and forward pass
# ---------------------------------------------------------------------------

def init_stage2_params(cfg: Stage2Config, latent_h: int, latent_c: int,
                       n_subjects: int, audio_channels: int, rng) -> dict:
    """Flat name->Tensor dict for the denoiser; see module docstring for
    the stream layout. Embedding tables are rows of a plain matrix so
    convex style mixtures work by matrix product."""
    d = cfg.embed_dim
    params: dict = {}
    nn.init_linear(params, "noise_enc", latent_h * latent_c, d, rng)
    params["style.E"] = Tensor(nn.glorot(rng, n_subjects, d), requires_grad=True)
    params["step.E"] = Tensor(nn.glorot(rng, cfg.steps, d), requires_grad=True)
    if cfg.audio_backend == "features":
        nn.init_linear(params, "audio.proj", audio_channels, d, rng)
    else:
        width = cfg.conv_width
        nn.init_linear(params, "audio.conv0", width * audio_channels, d, rng)
        for i in range(1, cfg.conv_layers):
            nn.init_linear(params, f"audio.conv{i}", width * d, d, rng)
    for i in range(cfg.layers):
        nn.init_layer_norm(params, f"dec{i}.ln1", d)
        nn.init_attention(params, f"dec{i}.self", d, rng)
        nn.init_layer_norm(params, f"dec{i}.ln2", d)
        nn.init_attention(params, f"dec{i}.cross", d, rng)
        nn.init_layer_norm(params, f"dec{i}.ln3", d)
        nn.init_feed_forward(params, f"dec{i}.ff", d, d * cfg.ff_mult, rng)
    nn.init_layer_norm(params, "dec.lnf", d)
    nn.init_linear(params, "head", d, latent_h * latent_c, rng)
    return params


def _causal_conv(params: dict, name: str, x: Tensor, width: int) -> Tensor:
    """Temporal convolution that only looks back: frame t mixes frames
    [t-width+1, t], zero-padded before the first frame."""
    t, c = x.shape
    padded = ad.concat([Tensor(np.zeros((width - 1, c))), x], axis=0)
    windows = np.arange(t)[:, None] + np.arange(width)[None, :]
    stacked = ad.take_rows(padded, windows).reshape(t, width * c)
    return nn.linear(params, name, stacked)


def _audio_stream(params: dict, cfg: Stage2Config, audio: np.ndarray) -> Tensor:
    """Aligned audio (T, C_a) -> embedded track (T, D)."""
    x = Tensor(np.asarray(audio, dtype=np.float64))
    if cfg.audio_backend == "features":
        return nn.linear(params, "audio.proj", x)
    for i in range(cfg.conv_layers):
        x = _causal_conv(params, f"audio.conv{i}", x, cfg.conv_width)
        if i < cfg.conv_layers - 1:
            x = ad.leaky_relu(x, nn.LEAKY_SLOPE)
    return x


def encode_conditions(z_n, bundle: ConditioningBundle, params: dict,
                      cfg: Stage2Config):
    """Embed everything into (query stream, key/value stream), both (T, D).

    Query = noisy-latent embedding + style embedding; key/value = audio
    embedding + step embedding, with the audio resampled to the latent
    frame count first.
    """
    z_n = ad.as_tensor(z_n)
    t = z_n.shape[0]
    flat = z_n.reshape(t, z_n.shape[1] * z_n.shape[2])
    if flat.shape[1] != params["noise_enc.W"].shape[0]:
        raise ValueError(
            f"latents give {flat.shape[1]} features per frame, denoiser expects "
            f"{params['noise_enc.W'].shape[0]}"
        )
    if bundle.style.size != params["style.E"].shape[0]:
        raise ValueError(
            f"style vector covers {bundle.style.size} subjects, embedding table "
            f"has {params['style.E'].shape[0]}"
        )
    if bundle.step is None:
        raise ValueError("conditioning bundle carries no denoising step")
    if bundle.step > params["step.E"].shape[0]:
        raise ValueError(
            f"step {bundle.step} outside the [1, {params['step.E'].shape[0]}] table"
        )
    style_row = Tensor(bundle.style[None, :]) @ params["style.E"]
    query = nn.linear(params, "noise_enc", flat) + style_row
    audio = align_audio_to_motion(bundle.audio, t)
    step_row = ad.take_rows(params["step.E"], np.array([bundle.step - 1]))
    kv = _audio_stream(params, cfg, audio) + step_row
    return query, kv


def denoiser_predict(z_n, bundle: ConditioningBundle, params: dict,
                     cfg: Stage2Config):
    """Predict clean latents from noisy ones; shape-preserving.

    Returns a plain array when z_n is one, a graph Tensor otherwise.
    """
    plain = not isinstance(z_n, Tensor)
    z_n = ad.as_tensor(z_n)
    if z_n.value.ndim != 3:
        raise ValueError(f"latents must be (T, H, C), got {z_n.shape}")
    t, h, c = z_n.shape
    x, kv = encode_conditions(z_n, bundle, params, cfg)
    self_bias = nn.causal_bias(cfg.heads, t, cfg.bias_period)
    cross_bias = nn.alignment_bias(t)
    for i in range(cfg.layers):
        name = f"dec{i}"
        q = nn.layer_norm(params, name + ".ln1", x)
        x = x + nn.attention(params, name + ".self", q, q, cfg.heads, self_bias)
        q = nn.layer_norm(params, name + ".ln2", x)
        x = x + nn.attention(params, name + ".cross", q, kv, cfg.heads, cross_bias)
        x = x + nn.feed_forward(params, name + ".ff", nn.layer_norm(params, name + ".ln3", x))
    out = nn.linear(params, "head", nn.layer_norm(params, "dec.lnf", x)).reshape(t, h, c)
    return out.value if plain else out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def huber_mean(diff, delta: float) -> Tensor:
    """Per-element mean Huber penalty: quadratic inside delta, linear out."""
    diff = ad.as_tensor(diff)
    mag = ad.absolute(diff)
    quadratic = 0.5 * diff * diff
    linear_tail = delta * mag - (0.5 * delta * delta)
    return ad.where(mag.value <= delta, quadratic, linear_tail).mean()


def stage2_loss(z0_hat, z0, cfg: Stage2Config):
    """Huber recovery term plus Huber frame-difference term; the velocity
    term is identically 0 for single-frame sequences. Returns
    (total Tensor, float components)."""
    z0_hat, z0 = ad.as_tensor(z0_hat), ad.as_tensor(z0)
    recon = huber_mean(z0_hat - z0, cfg.huber_delta)
    if z0_hat.shape[0] >= 2:
        vel_pred = z0_hat[1:] - z0_hat[:-1]
        vel_true = z0[1:] - z0[:-1]
        vel = huber_mean(vel_pred - vel_true, cfg.huber_delta)
    else:
        vel = ad.as_tensor(0.0)
    total = cfg.lambda_rec * recon + cfg.lambda_vel * vel
    components = {
        "total": total.item(),
        "recon": recon.item(),
        "velocity": vel.item(),
    }
    return total, components


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Stage2Checkpoint:
    params: dict
    config: Stage2Config
    schedule: NoiseSchedule
    pyramid_hash: str
    stage1_hash: str
    seed: int
    loss_curve: np.ndarray


def stage1_fingerprint(params: dict) -> str:
    """Order-independent digest of the frozen first-stage weights, used to
    pin a stage-2 checkpoint to the exact autoencoder it was trained on."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].value, dtype=np.float32).tobytes())
    return h.hexdigest()


def latent_targets(corpus, stage1_ckpt: Stage1Checkpoint, pyramid: MeshPyramid,
                   split: str = "train") -> list:
    """Run the frozen first stage over a split: list of
    (clean latents (T, H, C), aligned audio (T, C_a), style one-hot)."""
    samples = corpus.split_samples(split)
    out = []
    for sample in samples:
        z = encode(sample.motion, pyramid, stage1_ckpt.params, stage1_ckpt.config)
        z0 = quantize(z, stage1_ckpt.params["codebook"].value).data
        audio = align_audio_to_motion(sample.audio.features, z0.shape[0])
        style = one_hot_style(corpus.style_index(sample.subject_id), corpus.n_subjects)
        out.append((z0, np.asarray(audio, dtype=np.float64), style))
    return out


def train_stage2(corpus, stage1_ckpt: Stage1Checkpoint, pyramid: MeshPyramid,
                 cfg: Stage2Config, seed: int | None = None) -> Stage2Checkpoint:
    """Train the denoiser against frozen first-stage latents.

    Each step draws a uniform step number, noises the clean latents, and
    regresses the prediction back onto them. Only denoiser parameters are
    updated; the first stage is never touched. Raises DivergenceError if
    the loss goes non-finite.
    """
    if stage1_ckpt.pyramid_hash != pyramid_hash(pyramid):
        raise ValueError("first-stage checkpoint was trained on a different pyramid")
    if seed is None:
        seed = cfg.seed if cfg.seed is not None else 0
    targets = latent_targets(corpus, stage1_ckpt, pyramid, "train")
    if not targets:
        raise ValueError("corpus has no training samples")
    schedule = make_noise_schedule(cfg.steps, cfg.schedule)
    h, c = targets[0][0].shape[1:]
    params = init_stage2_params(cfg, h, c, corpus.n_subjects,
                                targets[0][1].shape[1], named_rng(seed, "stage2/init"))
    trng = named_rng(seed, "stage2/train")
    opt_kwargs = {"weight_decay": 1e-4} if cfg.optimizer == "adamw" else {}
    opt_cls = nn.AdamW if cfg.optimizer == "adamw" else nn.Adam
    opt = opt_cls(params, cfg.lr, **opt_kwargs)
    curve = np.zeros((cfg.epochs, 3))
    for epoch in range(cfg.epochs):
        opt.lr = nn.halved_lr(cfg.lr, epoch, cfg.lr_halve_every)
        epoch_rows = []
        for z0, audio, style in targets:
            opt.zero_grad()
            n = int(trng.integers(1, schedule.n_steps + 1))
            z_n, _ = forward_diffuse(z0, n, schedule, trng)
            bundle = ConditioningBundle(audio=audio, style=style, step=n)
            z0_hat = denoiser_predict(Tensor(z_n), bundle, params, cfg)
            total, comps = stage2_loss(z0_hat, z0, cfg)
            if not np.isfinite(comps["total"]):
                raise DivergenceError("stage2", epoch)
            total.backward()
            opt.step()
            epoch_rows.append([comps["total"], comps["recon"], comps["velocity"]])
        curve[epoch] = np.mean(epoch_rows, axis=0)
    return Stage2Checkpoint(
        params=params,
        config=cfg,
        schedule=schedule,
        pyramid_hash=stage1_ckpt.pyramid_hash,
        stage1_hash=stage1_fingerprint(stage1_ckpt.params),
        seed=int(seed),
        loss_curve=curve,
    )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample(bundle: ConditioningBundle, schedule: NoiseSchedule, params: dict,
           cfg: Stage2Config, latent_shape: tuple, rng=None, t_frames=None,
           deterministic: bool = False, initial_noise=None) -> np.ndarray:
    """Ancestral sampling around clean-sample predictions.

    Starts from standard normal Z^N (or a supplied one), and for
    n = N..2 re-noises the predicted Z0 to step n-1 through the posterior
    of the forward process; the final prediction is returned as-is.
    ``deterministic`` zeroes the posterior noise, so the output depends
    only on Z^N and the conditioning. Frame count defaults to the audio
    length.
    """
    h, c = latent_shape
    t = int(t_frames) if t_frames is not None else bundle.audio.shape[0]
    if t < 1:
        raise ValueError("need at least one frame")
    if initial_noise is not None:
        z = np.array(initial_noise, dtype=np.float64)
        if z.shape != (t, h, c):
            raise ValueError(f"initial noise must be shaped {(t, h, c)}, got {z.shape}")
    else:
        if rng is None:
            raise ValueError("sample needs an rng when initial_noise is not given")
        z = rng.standard_normal((t, h, c))
    a_bar = schedule.alpha_bars
    z0_hat = z
    for n in range(schedule.n_steps, 0, -1):
        z0_hat = denoiser_predict(z, bundle.with_step(n), params, cfg)
        if n == 1:
            break
        beta = schedule.betas[n - 1]
        alpha = schedule.alphas[n - 1]
        gap = 1.0 - a_bar[n]
        mean = (np.sqrt(a_bar[n - 1]) * beta / gap) * z0_hat \
            + (np.sqrt(alpha) * (1.0 - a_bar[n - 1]) / gap) * z
        if deterministic:
            z = mean
        else:
            if rng is None:
                raise ValueError("stochastic sampling needs an rng")
            var = (1.0 - a_bar[n - 1]) / gap * beta
            z = mean + np.sqrt(var) * rng.standard_normal(z.shape)
    return z0_hat


@dataclass(frozen=True)
class GeneratedAnimation:
    """Sampling output: absolute faces, raw displacements, final latents."""

    faces: MotionSequence
    motion: MotionSequence
    latents: np.ndarray


def generate_animation(audio: AudioFeatures, style, template: FaceTemplate,
                       stage1_ckpt: Stage1Checkpoint, stage2_ckpt: Stage2Checkpoint,
                       pyramid: MeshPyramid, seed: int, snap_codebook: bool = False,
                       deterministic: bool = False, t_frames=None,
                       initial_noise=None) -> GeneratedAnimation:
    """Audio + style -> face sequence via the frozen first-stage decoder.

    ``style`` is either a subject index or an explicit convex weight
    vector. ``snap_codebook`` quantizes the sampled latents onto exact
    codebook rows before decoding (off by default).
    """
    if stage1_ckpt.pyramid_hash != stage2_ckpt.pyramid_hash:
        raise ValueError("checkpoints were trained on different pyramids")
    if stage1_ckpt.pyramid_hash != pyramid_hash(pyramid):
        raise ValueError("supplied pyramid does not match the checkpoints")
    if stage1_fingerprint(stage1_ckpt.params) != stage2_ckpt.stage1_hash:
        raise ValueError("first-stage weights differ from the ones stage 2 was trained on")
    if template.n_vertices != pyramid.meshes[0].n_vertices:
        raise ValueError(
            f"template has {template.n_vertices} vertices, pyramid base has "
            f"{pyramid.meshes[0].n_vertices}"
        )
    if isinstance(style, (int, np.integer)):
        style = one_hot_style(int(style), stage2_ckpt.params["style.E"].shape[0])
    features = np.asarray(audio.features, dtype=np.float64)
    bundle = ConditioningBundle(audio=features, style=style, step=None)
    cfg1 = stage1_ckpt.config
    z0 = sample(bundle, stage2_ckpt.schedule, stage2_ckpt.params, stage2_ckpt.config,
                (cfg1.latent_h, cfg1.latent_c), rng=named_rng(seed, "stage2/sample"),
                t_frames=t_frames, deterministic=deterministic,
                initial_noise=initial_noise)
    if snap_codebook:
        z0 = quantize(z0, stage1_ckpt.params["codebook"].value).data
    t = z0.shape[0]
    frame_rate = float(audio.rate) * t / features.shape[0]
    motion = decode(z0, stage1_ckpt.params, cfg1, frame_rate=frame_rate)
    faces = MotionSequence(data=motion.data + template.vertices[None, :, :],
                           frame_rate=frame_rate)
    return GeneratedAnimation(faces=faces, motion=motion, latents=z0)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_stage2_checkpoint(path, ckpt: Stage2Checkpoint) -> None:
    from .motion_autoencoder import _config_dict

    sections = {
        "meta/kind": container.pack_string("stage2"),
        "meta/config": container.pack_string(json.dumps(
            _config_dict(ckpt.config), sort_keys=True, separators=(",", ":"))),
        "meta/config_hash": container.pack_string(config_hash(ckpt.config)),
        "meta/pyramid_hash": container.pack_string(ckpt.pyramid_hash),
        "meta/stage1_hash": container.pack_string(ckpt.stage1_hash),
        "meta/seed": np.int64(ckpt.seed),
        "schedule/kind": container.pack_string(ckpt.schedule.kind),
        "schedule/betas": ckpt.schedule.betas.astype(np.float64),
        "curve": ckpt.loss_curve.astype(np.float64),
    }
    sections.update(nn.params_to_sections(ckpt.params))
    container.write_container(path, container.MAGIC_CHECKPOINT, sections)


def load_stage2_checkpoint(path) -> Stage2Checkpoint:
    _, _, sec = container.read_container(path, container.MAGIC_CHECKPOINT)
    kind = container.unpack_string(sec["meta/kind"])
    if kind != "stage2":
        raise container.ContainerError(f"{path}: checkpoint kind {kind!r}, expected 'stage2'")
    cfg = build_dataclass(
        Stage2Config, json.loads(container.unpack_string(sec["meta/config"])), "checkpoint"
    )
    schedule = NoiseSchedule(
        betas=sec["schedule/betas"],
        kind=container.unpack_string(sec["schedule/kind"]),
    )
    return Stage2Checkpoint(
        params=nn.params_from_sections(sec),
        config=cfg,
        schedule=schedule,
        pyramid_hash=container.unpack_string(sec["meta/pyramid_hash"]),
        stage1_hash=container.unpack_string(sec["meta/stage1_hash"]),
        seed=int(sec["meta/seed"].item()),
        loss_curve=sec["curve"].reshape(-1, 3),
    )
