"""Stage 1: quantized spatio-temporal autoencoder over mesh motion.

Per frame, spiral-convolution blocks walk the mesh pyramid down to its
coarsest level and a fusion layer emits an H x C token grid; a temporal
transformer mixes the T grids into continuous latents. Latents snap to
their nearest codebook rows (gradients pass straight through the snap),
and decoding runs a second temporal transformer followed by a per-frame
MLP back to V x 3 displacements.

Parameters live in a flat name->Tensor dict (see `nn`); the codebook is
the entry named "codebook".
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import container, kernels, nn
from .autodiff import Tensor
from .config import Stage1Config, build_dataclass, config_hash
from .motion import MotionSequence
from .pyramid import MeshPyramid, pyramid_hash
from .rng import named_rng


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, stage: str, epoch: int):
        super().__init__(f"{stage}: loss diverged at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class Codebook:
    """K x C latent dictionary."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] < 2:
            raise ValueError(f"codebook must be (K >= 2, C), got {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise ValueError("codebook entries must be finite")
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class LatentSequence:
    """T x H x C latent grid; quantized ones carry their codebook indices."""

    data: np.ndarray
    quantized: bool = False
    indices: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"latents must be (T, H, C), got {data.shape}")
        object.__setattr__(self, "data", data)
        if self.quantized:
            if self.indices is None:
                raise ValueError("quantized latents need indices")
            idx = np.asarray(self.indices, dtype=np.int64)
            if idx.shape != data.shape[:2]:
                raise ValueError("indices must be shaped (T, H)")
            object.__setattr__(self, "indices", idx)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class Stage1Checkpoint:
    params: dict
    config: Stage1Config
    pyramid_hash: str
    seed: int
    loss_curve: np.ndarray  # (epochs, 3): total, recon, quant


# ---------------------------------------------------------------------------
# kernel-backed graph ops
# ---------------------------------------------------------------------------

def _gather_frames(x: Tensor, table: np.ndarray, sentinel: int) -> Tensor:
    """(T, V, C) -> (T, rows, K*C) spiral neighborhoods, batched over frames
    by folding time into the feature axis (one kernel call per op)."""
    t, v, c = x.shape
    rows, k = table.shape
    folded = np.moveaxis(x.value, 0, 1).reshape(v, t * c)
    gathered = kernels.spiral_gather(folded, table, sentinel)
    val = np.moveaxis(gathered.reshape(rows, k, t, c), 2, 0).reshape(t, rows, k * c)

    def vjp(g):
        gg = np.moveaxis(g.reshape(t, rows, k, c), 0, 2).reshape(rows, k * t * c)
        back = kernels.spiral_scatter(np.ascontiguousarray(gg), table, sentinel, v)
        return np.moveaxis(back.reshape(v, t, c), 0, 1)

    return ad.node(val, (x, vjp))


def _pool_frames(x: Tensor, dmap) -> Tensor:
    """(T, V_fine, C) -> (T, V_coarse, C) through a DownsampleMap."""
    t, v, c = x.shape
    folded = np.moveaxis(x.value, 0, 1).reshape(v, t * c)
    pooled = kernels.csr_matvec(dmap.pool_indptr, dmap.pool_indices, dmap.pool_weights, folded)
    val = np.moveaxis(pooled.reshape(dmap.n_coarse, t, c), 0, 1)

    def vjp(g):
        gg = np.moveaxis(g, 0, 1).reshape(dmap.n_coarse, t * c)
        back = kernels.csr_matvec_adjoint(
            dmap.pool_indptr, dmap.pool_indices, dmap.pool_weights,
            np.ascontiguousarray(gg), v,
        )
        return np.moveaxis(back.reshape(v, t, c), 0, 1)

    return ad.node(val, (x, vjp))


def spiral_conv(features, table, weight, bias):
    """Spiral convolution: gather each vertex's ordered neighborhood and fuse
    it with one fully-connected layer. `features` is (V, C_in) or (T, V, C_in);
    `weight` is (kernel_size*C_in, C_out). Sentinel slots read as zeros.

    Returns an ndarray when every input is an ndarray, else a graph Tensor.
    """
    plain = not any(isinstance(a, Tensor) for a in (features, weight, bias))
    x, w, b = ad.as_tensor(features), ad.as_tensor(weight), ad.as_tensor(bias)
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    tbl = table.table if hasattr(table, "table") else np.asarray(table, dtype=np.int64)
    sentinel = table.pad_sentinel if hasattr(table, "pad_sentinel") else x.shape[1]
    k = tbl.shape[1]
    if w.shape[0] != k * x.shape[2]:
        raise ValueError(
            f"weight rows {w.shape[0]} != kernel_size*C_in = {k}*{x.shape[2]}"
        )
    out = _gather_frames(x, tbl, sentinel) @ w + b
    if single:
        out = out.reshape(out.shape[1:])
    return out.value if plain else out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_stage1_params(pyramid: MeshPyramid, cfg: Stage1Config, rng) -> dict:
    levels = len(pyramid.meshes)
    if len(cfg.encoder_channels) != levels:
        raise ValueError(
            f"encoder_channels has {len(cfg.encoder_channels)} entries for {levels} levels"
        )
    params: dict[str, Tensor] = {}
    c_in = 3
    for i, c_out in enumerate(cfg.encoder_channels):
        k = pyramid.tables[i].kernel_size
        params[f"enc.spiral{i}.W"] = Tensor(
            nn.glorot(rng, k * c_in, c_out), requires_grad=True
        )
        params[f"enc.spiral{i}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
        nn.init_layer_norm(params, f"enc.spiral{i}.ln", c_out)
        c_in = c_out
    d = cfg.latent_h * cfg.latent_c
    coarse_dim = pyramid.meshes[-1].n_vertices * cfg.encoder_channels[-1]
    nn.init_linear(params, "enc.fuse", coarse_dim, d, rng)
    for j in range(cfg.temporal_layers):
        nn.init_encoder_block(params, f"tenc{j}", d, cfg.ff_mult * d, rng)
    nn.init_layer_norm(params, "tenc.lnf", d)
    for j in range(cfg.temporal_layers):
        nn.init_encoder_block(params, f"tdec{j}", d, cfg.ff_mult * d, rng)
    nn.init_layer_norm(params, "tdec.lnf", d)
    nn.init_linear(params, "dec.hidden", d, cfg.decoder_hidden, rng)
    nn.init_linear(params, "dec.out", cfg.decoder_hidden, pyramid.meshes[0].n_vertices * 3, rng)
    k_size = cfg.codebook_size
    entries = rng.uniform(-1.0 / k_size, 1.0 / k_size, size=(k_size, cfg.latent_c))
    if np.unique(entries, axis=0).shape[0] != k_size:
        raise ValueError("codebook init produced duplicate rows")
    params["codebook"] = Tensor(entries, requires_grad=True)
    return params


def _decoder_vertices(params: dict) -> int:
    return params["dec.out.b"].value.size // 3


# ---------------------------------------------------------------------------
# forward passes (graph level)
# ---------------------------------------------------------------------------

def _encode_frames_t(x: Tensor, pyramid: MeshPyramid, params: dict, cfg: Stage1Config) -> Tensor:
    """(T, V, 3) -> (T, H*C) per-frame token grids."""
    levels = len(pyramid.meshes)
    h = x
    for i in range(levels):
        tbl = pyramid.tables[i]
        h = _gather_frames(h, tbl.table, tbl.pad_sentinel) @ params[f"enc.spiral{i}.W"]
        h = h + params[f"enc.spiral{i}.b"]
        if cfg.block_nonlinearity == "leaky_relu":
            h = ad.leaky_relu(h, nn.LEAKY_SLOPE)
            h = nn.layer_norm(params, f"enc.spiral{i}.ln", h)
        if i < levels - 1:
            h = _pool_frames(h, pyramid.maps[i])
    t = x.shape[0]
    flat = h.reshape((t, h.shape[1] * h.shape[2]))
    return nn.linear(params, "enc.fuse", flat)


def _encode_t(x: Tensor, pyramid: MeshPyramid, params: dict, cfg: Stage1Config) -> Tensor:
    t = x.shape[0]
    d = cfg.latent_h * cfg.latent_c
    tok = _encode_frames_t(x, pyramid, params, cfg) + nn.sinusoidal_positions(t, d)
    for j in range(cfg.temporal_layers):
        tok = nn.encoder_block(params, f"tenc{j}", tok, cfg.temporal_heads)
    tok = nn.layer_norm(params, "tenc.lnf", tok)
    return tok.reshape((t, cfg.latent_h, cfg.latent_c))


def _decode_t(z: Tensor, params: dict, cfg: Stage1Config) -> Tensor:
    t = z.shape[0]
    d = cfg.latent_h * cfg.latent_c
    tok = z.reshape((t, d)) + nn.sinusoidal_positions(t, d)
    for j in range(cfg.temporal_layers):
        tok = nn.encoder_block(params, f"tdec{j}", tok, cfg.temporal_heads)
    tok = nn.layer_norm(params, "tdec.lnf", tok)
    hidden = ad.leaky_relu(nn.linear(params, "dec.hidden", tok), nn.LEAKY_SLOPE)
    out = nn.linear(params, "dec.out", hidden)
    return out.reshape((t, _decoder_vertices(params), 3))


def _quantize_t(z_hat: Tensor, codebook: Tensor):
    """Returns (straight-through latents, codebook-bound latents, indices)."""
    t, h, c = z_hat.shape
    idx = kernels.nearest_codes(
        np.ascontiguousarray(z_hat.value.reshape(t * h, c)), codebook.value
    )
    z_q = ad.take_rows(codebook, idx).reshape((t, h, c))
    z_st = z_hat + ad.stop_gradient(z_q - z_hat)
    return z_st, z_q, idx.reshape(t, h)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def encode_spatial(frame: np.ndarray, pyramid: MeshPyramid, params: dict,
                   cfg: Stage1Config) -> np.ndarray:
    """One frame (V, 3) -> its (H, C) token grid."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (pyramid.meshes[0].n_vertices, 3):
        raise ValueError(
            f"frame shape {frame.shape} does not match level-0 mesh "
            f"({pyramid.meshes[0].n_vertices}, 3)"
        )
    tokens = _encode_frames_t(Tensor(frame[None]), pyramid, params, cfg)
    return tokens.value.reshape(cfg.latent_h, cfg.latent_c)


def encode(motion: MotionSequence, pyramid: MeshPyramid, params: dict,
           cfg: Stage1Config) -> LatentSequence:
    """Motion -> continuous latents (T, H, C)."""
    if motion.n_vertices != pyramid.meshes[0].n_vertices:
        raise ValueError("motion vertex count does not match the pyramid")
    z = _encode_t(Tensor(motion.data), pyramid, params, cfg)
    return LatentSequence(data=z.value)


def quantize(z, codebook) -> LatentSequence:
    """Snap latents to their nearest codebook rows (lowest index on ties)."""
    entries = codebook.entries if isinstance(codebook, Codebook) else np.asarray(codebook)
    if entries.ndim != 2 or entries.shape[0] == 0:
        raise ValueError("codebook is empty")
    data = z.data if isinstance(z, LatentSequence) else np.asarray(z, dtype=np.float64)
    t, h, c = data.shape
    idx = kernels.nearest_codes(
        np.ascontiguousarray(data.reshape(t * h, c)), np.ascontiguousarray(entries)
    ).reshape(t, h)
    return LatentSequence(data=entries[idx], quantized=True, indices=idx)


def decode(z, params: dict, cfg: Stage1Config, frame_rate: float = 25.0) -> MotionSequence:
    """Latents (T, H, C) -> motion (T, V, 3)."""
    data = z.data if isinstance(z, LatentSequence) else np.asarray(z, dtype=np.float64)
    if data.ndim != 3 or data.shape[1:] != (cfg.latent_h, cfg.latent_c):
        raise ValueError(
            f"latents shaped {data.shape}, expected (T, {cfg.latent_h}, {cfg.latent_c})"
        )
    out = _decode_t(Tensor(data), params, cfg)
    return MotionSequence(data=out.value, frame_rate=frame_rate)


def stage1_loss(m_hat, m, z_hat, z_q, cfg: Stage1Config):
    """Mean-L1 reconstruction plus codebook/commitment terms (per-element
    means throughout). Returns (total Tensor, float components)."""
    m_hat, m = ad.as_tensor(m_hat), ad.as_tensor(m)
    z_hat, z_q = ad.as_tensor(z_hat), ad.as_tensor(z_q)
    recon = ad.absolute(m_hat - m).mean()
    codebook_term = ((ad.stop_gradient(z_hat) - z_q) ** 2.0).mean()
    commit_term = ((z_hat - ad.stop_gradient(z_q)) ** 2.0).mean()
    quant = codebook_term + cfg.beta * commit_term
    total = cfg.lambda_rec * recon + cfg.lambda_quant * quant
    components = {
        "total": total.item(),
        "recon": recon.item(),
        "codebook": codebook_term.item(),
        "commitment": commit_term.item(),
        "quant": quant.item(),
    }
    return total, components


def reconstruct(motion: MotionSequence, pyramid: MeshPyramid, params: dict,
                cfg: Stage1Config) -> MotionSequence:
    """encode -> quantize -> decode round trip with the trained codebook."""
    z_hat = encode(motion, pyramid, params, cfg)
    z_q = quantize(z_hat, params["codebook"].value)
    return decode(z_q, params, cfg, frame_rate=motion.frame_rate)


def train_stage1(corpus, pyramid: MeshPyramid, cfg: Stage1Config,
                 seed: int | None = None) -> Stage1Checkpoint:
    """Per-sequence gradient steps (batch of one), lr halved on schedule.

    The codebook only receives gradient through the quantization terms, so
    lambda_quant=0 leaves it untouched. Raises DivergenceError if the loss
    goes non-finite.
    """
    if seed is None:
        seed = cfg.seed if cfg.seed is not None else 0
    samples = corpus.train_samples()
    if not samples:
        raise ValueError("corpus has no training samples")
    params = init_stage1_params(pyramid, cfg, named_rng(seed, "stage1/init"))
    opt_kwargs = {"weight_decay": cfg.weight_decay} if cfg.optimizer == "adamw" else {}
    opt_cls = nn.AdamW if cfg.optimizer == "adamw" else nn.Adam
    opt = opt_cls(params, cfg.lr, **opt_kwargs)
    curve = np.zeros((cfg.epochs, 3))
    for epoch in range(cfg.epochs):
        opt.lr = nn.halved_lr(cfg.lr, epoch, cfg.lr_halve_every)
        epoch_rows = []
        for sample in samples:
            opt.zero_grad()
            m = Tensor(sample.motion.data)
            z_hat = _encode_t(m, pyramid, params, cfg)
            z_st, z_q, _ = _quantize_t(z_hat, params["codebook"])
            m_hat = _decode_t(z_st, params, cfg)
            total, comps = stage1_loss(m_hat, m, z_hat, z_q, cfg)
            if not np.isfinite(comps["total"]):
                raise DivergenceError("stage1", epoch)
            total.backward()
            opt.step()
            epoch_rows.append([comps["total"], comps["recon"], comps["quant"]])
        curve[epoch] = np.mean(epoch_rows, axis=0)
    return Stage1Checkpoint(
        params=params,
        config=cfg,
        pyramid_hash=pyramid_hash(pyramid),
        seed=int(seed),
        loss_curve=curve,
    )


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_stage1_checkpoint(path, ckpt: Stage1Checkpoint) -> None:
    sections = {
        "meta/kind": container.pack_string("stage1"),
        "meta/config": container.pack_string(json.dumps(
            _config_dict(ckpt.config), sort_keys=True, separators=(",", ":"))),
        "meta/config_hash": container.pack_string(config_hash(ckpt.config)),
        "meta/pyramid_hash": container.pack_string(ckpt.pyramid_hash),
        "meta/seed": np.int64(ckpt.seed),
        "curve": ckpt.loss_curve.astype(np.float64),
    }
    sections.update(nn.params_to_sections(ckpt.params))
    container.write_container(path, container.MAGIC_CHECKPOINT, sections)


def load_stage1_checkpoint(path) -> Stage1Checkpoint:
    _, _, sec = container.read_container(path, container.MAGIC_CHECKPOINT)
    kind = container.unpack_string(sec["meta/kind"])
    if kind != "stage1":
        raise container.ContainerError(f"{path}: checkpoint kind {kind!r}, expected 'stage1'")
    cfg = build_dataclass(
        Stage1Config, json.loads(container.unpack_string(sec["meta/config"])), "checkpoint"
    )
    return Stage1Checkpoint(
        params=nn.params_from_sections(sec),
        config=cfg,
        pyramid_hash=container.unpack_string(sec["meta/pyramid_hash"]),
        seed=int(sec["meta/seed"].item()),
        loss_curve=sec["curve"].reshape(-1, 3),
    )


def _config_dict(cfg) -> dict:
    import dataclasses

    return {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in dataclasses.asdict(cfg).items()
    }
