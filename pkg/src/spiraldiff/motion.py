"""Motion sequences, face templates, audio feature tracks, and their files.

Motion is stored as per-frame vertex displacements (mm) over a neutral
template mesh; animations are template + displacement. On disk everything
uses the shared binary container with float32 payloads.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .mesh_graph import MeshError, TriangleMesh, load_mesh


@dataclass(frozen=True)
class MotionSequence:
    """T x V x 3 vertex displacements over a template, at frame_rate Hz."""

    data: np.ndarray
    frame_rate: float

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3 or data.shape[0] < 1:
            raise MeshError(f"motion must be (T, V, 3) with T >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise MeshError("motion contains non-finite values")
        if self.frame_rate <= 0:
            raise MeshError("frame_rate must be positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "frame_rate", float(self.frame_rate))

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FaceTemplate:
    """Neutral face: the mesh vertices are the template positions (mm)."""

    mesh: TriangleMesh

    @property
    def vertices(self) -> np.ndarray:
        return self.mesh.vertices

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices


@dataclass(frozen=True)
class AudioFeatures:
    """T_a x C_a feature track sampled at `rate` frames per second."""

    features: np.ndarray
    rate: float

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"audio features must be (T_a, C_a), got {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("audio features contain non-finite values")
        if self.rate <= 0:
            raise ValueError("feature rate must be positive")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "rate", float(self.rate))

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_motion(path, seq: MotionSequence) -> None:
    container.write_container(
        path,
        container.MAGIC_MOTION,
        {
            "frame_rate": np.float64(seq.frame_rate),
            "data": seq.data.astype(np.float32),
        },
    )


def load_motion(path) -> MotionSequence:
    _, _, sections = container.read_container(path, container.MAGIC_MOTION)
    return MotionSequence(
        data=sections["data"].astype(np.float64),
        frame_rate=float(sections["frame_rate"]),
    )


def save_audio_features(path, audio: AudioFeatures) -> None:
    container.write_container(
        path,
        container.MAGIC_AUDIO,
        {
            "rate": np.float64(audio.rate),
            "features": audio.features.astype(np.float32),
        },
    )


def load_audio_features(path) -> AudioFeatures:
    _, _, sections = container.read_container(path, container.MAGIC_AUDIO)
    return AudioFeatures(
        features=sections["features"].astype(np.float64),
        rate=float(sections["rate"]),
    )


def load_template(path) -> FaceTemplate:
    return FaceTemplate(mesh=load_mesh(path))


def load_obj_sequence(directory, template: FaceTemplate, frame_rate: float) -> MotionSequence:
    """Import a directory of per-frame OBJ meshes (sorted by filename) as
    displacements over the template. All frames must share its topology."""
    paths = sorted(Path(directory).glob("*.obj"))
    if not paths:
        raise MeshError(f"{directory}: no .obj frames found")
    frames = []
    for p in paths:
        mesh = load_mesh(p)
        if mesh.n_vertices != template.n_vertices or not np.array_equal(
            mesh.faces, template.mesh.faces
        ):
            raise MeshError(f"{p}: topology differs from template")
        frames.append(mesh.vertices - template.vertices)
    return MotionSequence(data=np.stack(frames), frame_rate=frame_rate)
