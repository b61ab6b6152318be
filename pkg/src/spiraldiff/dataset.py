"""Corpus plumbing: synthetic audio-to-motion corpora plus disk loaders.

The synthetic generator builds a subdivided-icosahedron "face" with lip
and upper-face regions. Each sentence is driven by two band-limited
envelopes; audio features are a fixed linear mixing of the envelopes and
motion is a per-subject blendshape response to them, so the audio-motion
mapping is learnable at desk scale and subjects have distinct styles.
Motion and audio payloads are float32-representable, making write/read
round trips bit-identical.

On disk a corpus is a directory with an INI manifest (`corpus.ini`)
naming per-sample motion/audio files, subject templates, region masks,
and the base mesh.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CorpusConfig
from .container import load_vertex_mask, save_vertex_mask
from .mesh_graph import MeshError, TriangleMesh, connectivity_hash, icosphere, load_mesh, save_obj
from .motion import (
    AudioFeatures,
    FaceTemplate,
    MotionSequence,
    load_audio_features,
    load_motion,
    save_audio_features,
    save_motion,
)
from .rng import named_rng

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Sample:
    name: str
    motion: MotionSequence
    audio: AudioFeatures
    subject_id: int
    split: str
    template: FaceTemplate

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"sample {self.name}: unknown split {self.split!r}")
        if self.motion.n_vertices != self.template.n_vertices:
            raise MeshError(
                f"sample {self.name}: motion has {self.motion.n_vertices} vertices, "
                f"template has {self.template.n_vertices}"
            )


@dataclass(frozen=True)
class Corpus:
    samples: tuple
    base_mesh: TriangleMesh
    lip_mask: np.ndarray
    upper_mask: np.ndarray

    def __post_init__(self):
        if not self.samples:
            raise ValueError("corpus has no samples")
        object.__setattr__(self, "samples", tuple(self.samples))
        for mask_name in ("lip_mask", "upper_mask"):
            mask = np.asarray(getattr(self, mask_name), dtype=np.int64)
            if mask.size == 0:
                raise ValueError(f"{mask_name} is empty")
            if mask.min() < 0 or mask.max() >= self.base_mesh.n_vertices:
                raise ValueError(f"{mask_name} indexes outside the base mesh")
            object.__setattr__(self, mask_name, mask)
        for s in self.samples:
            if s.motion.n_vertices != self.base_mesh.n_vertices:
                raise MeshError(
                    f"sample {s.name}: {s.motion.n_vertices} vertices, "
                    f"base mesh has {self.base_mesh.n_vertices}"
                )
            if not np.array_equal(s.template.mesh.faces, self.base_mesh.faces):
                raise MeshError(f"sample {s.name}: template faces differ from base mesh")

    @property
    def roster(self) -> tuple:
        return tuple(sorted({s.subject_id for s in self.samples}))

    @property
    def n_subjects(self) -> int:
        return len(self.roster)

    def style_index(self, subject_id: int) -> int:
        roster = self.roster
        if subject_id not in roster:
            raise ValueError(f"unknown subject id {subject_id}")
        return roster.index(subject_id)

    def connectivity(self) -> str:
        return connectivity_hash(self.base_mesh)

    def split_samples(self, split: str) -> list:
        return [s for s in self.samples if s.split == split]

    def train_samples(self) -> list:
        return self.split_samples("train")

    def val_samples(self) -> list:
        return self.split_samples("val")

    def test_samples(self) -> list:
        return self.split_samples("test")


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def _envelope(rng: np.random.Generator, t: int) -> np.ndarray:
    """Band-limited drive signal in [0, 1]: a few low-frequency sinusoids."""
    tau = np.arange(t) / max(t, 1)
    freqs = rng.uniform(0.5, 3.5, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    amps = rng.uniform(0.3, 1.0, size=3)
    e = np.zeros(t)
    for f, p, a in zip(freqs, phases, amps):
        e += a * np.sin(2.0 * np.pi * f * tau + p)
    e -= e.min()
    span = e.max()
    return e / span if span > 0 else e


def _f32_exact(a: np.ndarray) -> np.ndarray:
    """Round to float32-representable values (kept as float64 in memory)."""
    return a.astype(np.float32).astype(np.float64)


def synthesize_corpus(cfg: CorpusConfig, seed: int) -> Corpus:
    """Fully seed-deterministic synthetic corpus (see module docstring)."""
    cfg.validate()
    mesh = icosphere(cfg.mesh_subdivisions)
    v = mesh.vertices
    y = v[:, 1]
    radial = v / np.linalg.norm(v, axis=1, keepdims=True)

    # smooth cap profiles; region masks cover wherever the blendshapes act
    lip_profile = np.clip((-y - 0.45) / 0.55, 0.0, 1.0)
    upper_profile = np.clip((y - 0.45) / 0.55, 0.0, 1.0)
    lip_mask = np.nonzero(lip_profile > 0.0)[0]
    upper_mask = np.nonzero(upper_profile > 0.0)[0]
    lip_shape = lip_profile[:, None] * radial
    upper_shape = upper_profile[:, None] * radial

    grng = named_rng(seed, "corpus/global")
    mixing = grng.uniform(-1.0, 1.0, size=(cfg.audio_channels, 2))
    gains = grng.uniform(0.7, 1.3, size=(cfg.subjects, 2))
    subject_scales = 1.0 + 0.04 * (np.arange(cfg.subjects) - (cfg.subjects - 1) / 2.0)

    templates = {
        s: FaceTemplate(mesh=TriangleMesh(vertices=v * subject_scales[s], faces=mesh.faces))
        for s in range(cfg.subjects)
    }

    n_train = cfg.sentences_per_subject - cfg.val_sentences - cfg.test_sentences
    samples = []
    for s in range(cfg.subjects):
        for u in range(cfg.sentences_per_subject):
            srng = named_rng(seed, f"corpus/subject{s}/sentence{u}")
            t = int(srng.integers(cfg.frames_min, cfg.frames_max + 1))
            e1 = _envelope(srng, t)
            e2 = _envelope(srng, t)
            drives = np.stack([e1, e2], axis=1)
            audio = _f32_exact(drives @ mixing.T)
            motion = cfg.motion_scale * (
                gains[s, 0] * e1[:, None, None] * lip_shape[None]
                + gains[s, 1] * e2[:, None, None] * upper_shape[None]
            )
            if cfg.noise_amplitude > 0:
                motion = motion + cfg.noise_amplitude * srng.standard_normal(motion.shape)
            if u < n_train:
                split = "train"
            elif u < n_train + cfg.val_sentences:
                split = "val"
            else:
                split = "test"
            samples.append(
                Sample(
                    name=f"s{s:02d}_u{u:02d}",
                    motion=MotionSequence(data=_f32_exact(motion), frame_rate=cfg.frame_rate),
                    audio=AudioFeatures(features=audio, rate=cfg.frame_rate),
                    subject_id=s,
                    split=split,
                    template=templates[s],
                )
            )
    return Corpus(
        samples=tuple(samples), base_mesh=mesh, lip_mask=lip_mask, upper_mask=upper_mask
    )


# ---------------------------------------------------------------------------
# disk layout
# ---------------------------------------------------------------------------

def save_corpus(root, corpus: Corpus) -> None:
    root = Path(root)
    for sub in ("templates", "masks", "motion", "audio"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    save_obj(root / "templates" / "base.obj", corpus.base_mesh)
    save_vertex_mask(root / "masks" / "lip.txt", corpus.lip_mask)
    save_vertex_mask(root / "masks" / "upper.txt", corpus.upper_mask)

    manifest = configparser.ConfigParser()
    manifest["corpus"] = {
        "base_mesh": "templates/base.obj",
        "lip_mask": "masks/lip.txt",
        "upper_mask": "masks/upper.txt",
    }
    written_templates = {}
    for s in corpus.samples:
        if s.subject_id not in written_templates:
            rel = f"templates/subject{s.subject_id:02d}.obj"
            save_obj(root / rel, s.template.mesh)
            written_templates[s.subject_id] = rel
        save_motion(root / "motion" / f"{s.name}.bin", s.motion)
        save_audio_features(root / "audio" / f"{s.name}.bin", s.audio)
        manifest[f"sample:{s.name}"] = {
            "motion": f"motion/{s.name}.bin",
            "audio": f"audio/{s.name}.bin",
            "subject": str(s.subject_id),
            "split": s.split,
            "template": written_templates[s.subject_id],
        }
    with open(root / "corpus.ini", "w") as fh:
        manifest.write(fh)


def load_corpus(root, manifest_name: str = "corpus.ini") -> Corpus:
    root = Path(root)
    manifest_path = root / manifest_name
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path}: manifest not found")
    manifest = configparser.ConfigParser()
    manifest.read(manifest_path)
    if "corpus" not in manifest:
        raise ValueError(f"{manifest_path}: missing [corpus] section")
    head = manifest["corpus"]

    missing = [
        str(root / head[key])
        for key in ("base_mesh", "lip_mask", "upper_mask")
        if not (root / head[key]).exists()
    ]
    samples = []
    templates = {}
    for section in manifest.sections():
        if not section.startswith("sample:"):
            continue
        record = manifest[section]
        paths = {key: root / record[key] for key in ("motion", "audio", "template")}
        absent = [str(p) for p in paths.values() if not p.exists()]
        if absent:
            missing.extend(absent)
            continue
        samples.append((section[len("sample:"):], record, paths))
    if missing:
        raise FileNotFoundError("missing corpus files: " + ", ".join(sorted(missing)))

    base_mesh = load_mesh(root / head["base_mesh"])
    built = []
    for name, record, paths in samples:
        tkey = str(paths["template"])
        if tkey not in templates:
            templates[tkey] = FaceTemplate(mesh=load_mesh(paths["template"]))
        template = templates[tkey]
        motion = load_motion(paths["motion"])
        if motion.n_vertices != base_mesh.n_vertices:
            raise MeshError(
                f"{paths['motion']}: {motion.n_vertices} vertices, "
                f"base mesh has {base_mesh.n_vertices}"
            )
        built.append(
            Sample(
                name=name,
                motion=motion,
                audio=load_audio_features(paths["audio"]),
                subject_id=int(record["subject"]),
                split=record["split"],
                template=template,
            )
        )
    return Corpus(
        samples=tuple(built),
        base_mesh=base_mesh,
        lip_mask=load_vertex_mask(root / head["lip_mask"]),
        upper_mask=load_vertex_mask(root / head["upper_mask"]),
    )


def corpus_stats(corpus: Corpus) -> dict:
    """Deterministic summary; acceptance thresholds are scaled from it."""
    abs_sum = 0.0
    abs_count = 0
    lip_amp_sum = 0.0
    lip_frames = 0
    duration = 0.0
    for s in corpus.samples:
        abs_sum += float(np.abs(s.motion.data).sum())
        abs_count += s.motion.data.size
        lip_norms = np.linalg.norm(s.motion.data[:, corpus.lip_mask, :], axis=2)
        lip_amp_sum += float(lip_norms.max(axis=1).sum())
        lip_frames += s.motion.n_frames
        duration += s.motion.n_frames / s.motion.frame_rate
    return {
        "samples": len(corpus.samples),
        "train": len(corpus.train_samples()),
        "val": len(corpus.val_samples()),
        "test": len(corpus.test_samples()),
        "subjects": corpus.n_subjects,
        "mean_abs_motion": abs_sum / abs_count,
        "lip_amplitude": lip_amp_sum / lip_frames,
        "duration_seconds": duration,
    }
