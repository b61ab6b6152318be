"""Metrics over vertex-displacement sequences, plus the std heatmap export.

All statistics use the population convention (divide by T, not T-1), and
all three metrics are invariant under any vertex relabeling applied
consistently to predictions, references, and masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh_graph import TriangleMesh

MASK_LABELS = ("lip", "upper_face")

# Full-scale reference values reported for this architecture on its original
# capture corpus (millimetres). Desk-scale synthetic runs land elsewhere by
# orders of magnitude; these are context, not targets.
REFERENCE_LVE_MM = 4.6440e-4
REFERENCE_FDD_MM = 3.8474e-5
REFERENCE_DIVERSITY_MM = 8.2176e-4


@dataclass(frozen=True)
class RegionMask:
    """Vertex index set naming a facial region."""

    indices: np.ndarray
    label: str = "lip"

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64).ravel()
        if indices.size == 0:
            raise ValueError("region mask is empty")
        if np.any(indices < 0):
            raise ValueError("region mask has negative vertex ids")
        if self.label not in MASK_LABELS:
            raise ValueError(f"mask label must be one of {MASK_LABELS}")
        object.__setattr__(self, "indices", indices)


@dataclass(frozen=True)
class MetricsReport:
    """Metric bundle for one evaluation run; missing entries stay None."""

    lve: float | None = None
    fdd: float | None = None
    diversity: float | None = None
    sample_count: int = 0
    config_hash: str = ""

    def __post_init__(self):
        if self.lve is not None and self.lve < 0:
            raise ValueError("lve must be >= 0")
        if self.diversity is not None and self.diversity < 0:
            raise ValueError("diversity must be >= 0")
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")

    def as_dict(self) -> dict:
        return {
            "lve": self.lve,
            "fdd": self.fdd,
            "diversity": self.diversity,
            "sample_count": self.sample_count,
            "config_hash": self.config_hash,
        }


def _as_frames(seq) -> np.ndarray:
    data = seq.data if hasattr(seq, "data") else np.asarray(seq, dtype=np.float64)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"expected (T, V, 3) motion, got {data.shape}")
    return np.asarray(data, dtype=np.float64)


def _mask_indices(mask, n_vertices: int) -> np.ndarray:
    indices = mask.indices if isinstance(mask, RegionMask) else np.asarray(mask)
    indices = np.asarray(indices, dtype=np.int64).ravel()
    if indices.size == 0:
        raise ValueError("region mask is empty")
    if np.any(indices < 0) or np.any(indices >= n_vertices):
        raise ValueError(f"mask indices outside [0, {n_vertices})")
    return indices


def lip_vertex_error(pred, gt, lip, squared: bool = False) -> float:
    """Mean over frames of the worst lip-vertex deviation in that frame.

    The per-vertex deviation is the Euclidean distance between predicted
    and reference positions; ``squared`` switches it to squared distance.
    """
    pred, gt = _as_frames(pred), _as_frames(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    idx = _mask_indices(lip, pred.shape[1])
    sq = ((pred[:, idx] - gt[:, idx]) ** 2).sum(axis=2)
    per_frame = sq.max(axis=1)
    if not squared:
        per_frame = np.sqrt(per_frame)
    return float(per_frame.mean())


def vertex_dynamics(seq) -> np.ndarray:
    """Per-vertex population std over time of the frame displacement norm."""
    data = _as_frames(seq)
    if data.shape[0] < 2:
        raise ValueError("dynamics need at least 2 frames")
    norms = np.linalg.norm(data, axis=2)
    return norms.std(axis=0)


def facial_dynamics_deviation(pred, gt, upper) -> float:
    """Mean over upper-face vertices of dynamics(pred) - dynamics(gt).

    Positive values mean the prediction moves more than the reference;
    the metric is signed by design.
    """
    pred, gt = _as_frames(pred), _as_frames(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    idx = _mask_indices(upper, pred.shape[1])
    diff = vertex_dynamics(pred)[idx] - vertex_dynamics(gt)[idx]
    return float(diff.mean())


def diversity(samples) -> float:
    """Mean over unordered sample pairs of the mean per-vertex, per-frame
    distance between the two sequences."""
    frames = [_as_frames(s) for s in samples]
    if len(frames) < 2:
        raise ValueError("diversity needs at least 2 samples")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise ValueError("diversity samples must share a shape")
    total = 0.0
    count = 0
    for i in range(len(frames)):
        for j in range(i + 1, len(frames)):
            total += float(np.linalg.norm(frames[i] - frames[j], axis=2).mean())
            count += 1
    return total / count


def motion_std_heatmap(seq, mesh: TriangleMesh | None = None,
                       image_path=None, raw_path=None) -> np.ndarray:
    """Per-vertex std of displacement magnitude over time, shape (V,).

    When ``raw_path`` is given the field is written as little-endian
    float32, one value per vertex. When ``image_path`` is given a
    color-mapped snapshot is rendered (``mesh`` supplies the vertex
    layout for the projection).
    """
    field = vertex_dynamics(seq)
    if raw_path is not None:
        field.astype("<f4").tofile(raw_path)
    if image_path is not None:
        if mesh is None:
            raise ValueError("rendering the heatmap needs the mesh")
        if mesh.n_vertices != field.size:
            raise ValueError("mesh vertex count does not match the sequence")
        _render_heatmap(field, mesh, image_path)
    return field


def _render_heatmap(field: np.ndarray, mesh: TriangleMesh, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xy = mesh.vertices[:, :2]
    fig, ax = plt.subplots(figsize=(5, 5))
    sc = ax.scatter(xy[:, 0], xy[:, 1], c=field, cmap="viridis", s=18)
    ax.set_aspect("equal")
    ax.set_title("motion std per vertex")
    fig.colorbar(sc, ax=ax, shrink=0.8)
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# key-value report files
# ---------------------------------------------------------------------------

def write_metrics(path, report: MetricsReport) -> None:
    """Plain ``key=value`` lines, floats at full double precision."""
    lines = []
    for key, value in sorted(report.as_dict().items()):
        if value is None:
            continue
        if isinstance(value, float):
            lines.append(f"{key}={value!r}")
        else:
            lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_metrics(path) -> MetricsReport:
    fields: dict = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in ("lve", "fdd", "diversity"):
            fields[key] = float(value)
        elif key == "sample_count":
            fields[key] = int(value)
        elif key == "config_hash":
            fields[key] = value
    return MetricsReport(**fields)
