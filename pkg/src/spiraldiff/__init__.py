"""Speech-conditioned 3D facial motion: spiral-conv mesh VQ autoencoder plus
conditional latent diffusion, with a property-based evaluation suite."""

from .config import (
    ConfigError,
    CorpusConfig,
    ExperimentConfig,
    PyramidConfig,
    Stage1Config,
    Stage2Config,
    config_hash,
    load_config,
)
from .dataset import Corpus, Sample, corpus_stats, load_corpus, save_corpus, synthesize_corpus
from .evaluation import (
    MetricsReport,
    RegionMask,
    diversity,
    facial_dynamics_deviation,
    lip_vertex_error,
    motion_std_heatmap,
)
from .latent_diffusion import (
    ConditioningBundle,
    NoiseSchedule,
    Stage2Checkpoint,
    align_audio_to_motion,
    denoiser_predict,
    forward_diffuse,
    generate_animation,
    make_noise_schedule,
    sample,
    stage2_loss,
    train_stage2,
)
from .mesh_graph import (
    SpiralIndexTable,
    TriangleMesh,
    build_spiral_table,
    icosphere,
    k_disk,
    k_ring,
    load_mesh,
    spiral_sequence,
)
from .motion import AudioFeatures, FaceTemplate, MotionSequence
from .motion_autoencoder import (
    Codebook,
    DivergenceError,
    LatentSequence,
    Stage1Checkpoint,
    decode,
    encode,
    quantize,
    reconstruct,
    spiral_conv,
    stage1_loss,
    train_stage1,
)
from .pyramid import MeshPyramid, build_pyramid, load_pyramid, pyramid_hash, save_pyramid

__version__ = "0.1.0"

__all__ = [
    "AudioFeatures",
    "Codebook",
    "ConditioningBundle",
    "ConfigError",
    "Corpus",
    "CorpusConfig",
    "DivergenceError",
    "ExperimentConfig",
    "FaceTemplate",
    "LatentSequence",
    "MeshPyramid",
    "MetricsReport",
    "MotionSequence",
    "NoiseSchedule",
    "PyramidConfig",
    "RegionMask",
    "Sample",
    "SpiralIndexTable",
    "Stage1Checkpoint",
    "Stage1Config",
    "Stage2Checkpoint",
    "Stage2Config",
    "TriangleMesh",
    "align_audio_to_motion",
    "build_pyramid",
    "build_spiral_table",
    "config_hash",
    "corpus_stats",
    "decode",
    "denoiser_predict",
    "diversity",
    "encode",
    "facial_dynamics_deviation",
    "forward_diffuse",
    "generate_animation",
    "icosphere",
    "k_disk",
    "k_ring",
    "lip_vertex_error",
    "load_config",
    "load_corpus",
    "load_mesh",
    "load_pyramid",
    "make_noise_schedule",
    "motion_std_heatmap",
    "pyramid_hash",
    "quantize",
    "reconstruct",
    "sample",
    "save_corpus",
    "save_pyramid",
    "spiral_conv",
    "spiral_sequence",
    "stage1_loss",
    "stage2_loss",
    "synthesize_corpus",
    "train_stage1",
    "train_stage2",
]
