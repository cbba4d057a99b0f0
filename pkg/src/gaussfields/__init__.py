"""gaussfields: neural fields with a hash-grid encoder and a single layer of
Gaussian kernels as the decoder."""

from .numerics import AdamState, Rng, ScheduleSpec, adam_step, finite_diff_grad, lr_schedule
from .grid import (
    FeatureGrid,
    GridConfig,
    encode_batch,
    encode_point,
    encoder_backward,
    hash_index,
    level_resolution,
    slice_levels,
)
from .decoder import (
    DecoderOutput,
    GaussianRbfLayer,
    decode,
    decode_batch,
    decode_full,
    decode_sliced,
    decoder_backward,
    init_centers_from_features,
    init_random,
    kernel_eval,
)
from .model import (
    FieldModel,
    GradBuffer,
    ModelOptimizer,
    build_model,
    default_grid_config,
    model_backward,
    model_forward,
)
from .training import (
    FitConfig,
    TrainBatch,
    TrainingDiverged,
    fit,
    rgb_loss,
    sample_pixels,
    sample_sdf_points,
    sdf_loss,
    train_step,
    write_history_csv,
)
from .image import (
    ImageBuffer,
    error_map,
    load_image,
    psnr,
    render_image,
    save_image,
)
from .mesh import MeshSdf, TriMesh, load_obj, load_ply, mesh_sdf, save_obj, save_ply
from .checkpoint import load_checkpoint, save_checkpoint
from .sdf import (
    BoxSdf,
    CapsuleSdf,
    SphereSdf,
    TorusSdf,
    UnionSdf,
    analytic_sdf,
    chamfer_l1,
    make_oracle,
    marching_cubes,
    mesh_chamfer_l1,
    normal_metrics,
    volumetric_iou,
)

__version__ = "0.1.0"
