"""
Data models for NIFT configuration, persisted artifacts and reports.

Numeric working types (Geometry, RigidTransform, InteractionTemplate, ...)
live next to the code that computes them; the models here are the
validated JSON surface: config sections, documents written to disk,
benchmark reports.
"""
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


# ============ Enums ============

class GeometryKind(str, Enum):
    """Representation of an object."""
    MESH = "mesh"
    SPLAT_CLOUD = "splat-cloud"


class DirectionScheme(str, Enum):
    """Discretization of the sphere of ray directions."""
    FIBONACCI = "fibonacci"
    EQUIANGULAR = "equiangular"


class FieldBackend(str, Enum):
    ANALYTIC = "analytic"
    LEARNED = "learned"


class Activation(str, Enum):
    """Decoder nonlinearity. All are continuously differentiable."""
    SOFTPLUS = "softplus"
    TANH = "tanh"
    IDENTITY = "identity"


class TargetKind(str, Enum):
    """What a regressor is trained to predict."""
    SCF = "scf"
    OCCUPANCY = "occupancy"


class ShapeKind(str, Enum):
    MUG = "mug"
    BOWL = "bowl"
    BOTTLE = "bottle"
    RACK = "rack"
    SHELF = "shelf"
    GRIPPER_PROXY = "gripper-proxy"


class TaskKind(str, Enum):
    GRASP = "grasp"
    PLACE = "place"


class PoseRegime(str, Enum):
    UPRIGHT = "upright"
    ARBITRARY = "arbitrary"


class QueryScheme(str, Enum):
    IBS = "ibs"
    BPS = "bps"


class FeatureKind(str, Enum):
    SCF = "scf"
    NIF = "nif"
    NDF = "ndf"


class SymmetryKind(str, Enum):
    NONE = "none"
    AXIS = "axis"


Matrix4 = List[List[float]]

IDENTITY4: Matrix4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
]


def _check_matrix4(value: Matrix4) -> Matrix4:
    if len(value) != 4 or any(len(row) != 4 for row in value):
        raise ValueError("expected a 4x4 row-major matrix")
    return value


# ============ Config Sections ============

class ScfConfig(BaseModel):
    """Space coverage feature settings."""
    order: int = Field(default=5, ge=0, le=10)
    dir_count: int = Field(default=2000, ge=1)
    scheme: DirectionScheme = DirectionScheme.FIBONACCI
    domain_scale: float = Field(default=1.5, gt=1.0)


class IbsConfig(BaseModel):
    """Bisector extraction settings."""
    grid_res: int = Field(default=64, ge=16)
    equidistance_tol: float = Field(default=0.01, gt=0.0, lt=1.0)
    truncation: float = Field(default=1.0, gt=0.0)
    max_bisection_iters: int = Field(default=60, ge=1)
    contact_tolerance: float = Field(default=0.02, ge=0.0)  # fraction of scene diameter
    penetration_samples: int = Field(default=512, ge=16)


class ImportanceConfig(BaseModel):
    """Importance weights w ∝ 1 / (d_A + delta) ** exponent."""
    exponent: float = Field(default=2.0, ge=0.0)
    delta: Optional[float] = Field(default=None, gt=0.0)
    delta_fraction: float = Field(default=0.01, gt=0.0)  # of scene diameter when delta is unset


class RegressorConfig(BaseModel):
    """Encoder/decoder architecture shared by the SCF and occupancy networks."""
    encoder_widths: List[int] = [64, 128]
    decoder_widths: List[int] = [64, 64, 32]
    activation: Activation = Activation.SOFTPLUS
    cloud_points: int = Field(default=256, ge=16)
    include_output_layer: bool = True
    concat_pre_activation: bool = False

    @field_validator("encoder_widths", "decoder_widths")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if not value or any(w <= 0 for w in value):
            raise ValueError("layer widths must be positive and non-empty")
        return value


class TrainConfig(BaseModel):
    lr: float = Field(default=1e-4, gt=0.0)
    epochs: int = Field(default=50, ge=0)
    batch_objects: int = Field(default=8, ge=1)
    batch_queries: int = Field(default=64, ge=1)
    holdout_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    augment_rotations: bool = True
    seed: int = 0


class TrainingSetConfig(BaseModel):
    num_objects: int = Field(default=100, ge=1)
    queries_per_object: int = Field(default=256, ge=1)
    scale_range: Tuple[float, float] = (0.5, 2.0)
    cloud_points: int = Field(default=256, ge=16)
    scf: ScfConfig = ScfConfig(dir_count=1000)


class TemplateConfig(BaseModel):
    samples: int = Field(default=128, ge=1)
    prefer_sparse: bool = False
    density_delta_fraction: float = Field(default=1e-4, gt=0.0)
    ibs: IbsConfig = IbsConfig()
    importance: ImportanceConfig = ImportanceConfig()


class OptimizeConfig(BaseModel):
    """Pose optimization settings."""
    restarts: int = Field(default=10, ge=1)
    max_iters: int = Field(default=500, ge=1)
    learning_rate: float = Field(default=1e-2, gt=0.0)
    init_translation_scale: float = Field(default=0.1, ge=0.0)
    window: int = Field(default=10, ge=1)
    min_improvement: float = Field(default=1e-6, ge=0.0)
    out_of_domain_weight: float = Field(default=10.0, ge=0.0)
    fd_rotation_step: float = Field(default=1e-3, gt=0.0)
    fd_translation_step: float = Field(default=1e-3, gt=0.0)  # fraction of target diameter
    seed: int = 0


class CpdConfig(BaseModel):
    w_outlier: float = Field(default=0.0, ge=0.0, lt=1.0)
    max_iters: int = Field(default=150, ge=1)
    tol: float = Field(default=1e-8, gt=0.0)
    points: int = Field(default=256, ge=4)  # surface samples per cloud in the benchmark


class HarnessConfig(BaseModel):
    """Success-proxy thresholds."""
    penetration_fraction: float = Field(default=0.02, gt=0.0)
    rotation_threshold_deg: float = Field(default=15.0, gt=0.0)
    translation_fraction: float = Field(default=0.1, gt=0.0)
    penetration_samples: int = Field(default=1024, ge=16)
    bps_count: int = Field(default=256, ge=1)
    arbitrary_scale_range: Tuple[float, float] = (0.8, 1.2)


class NiftConfig(BaseModel):
    """Defaults for every section, loaded from nift_config.json."""
    scf: ScfConfig = ScfConfig()
    ibs: IbsConfig = IbsConfig()
    importance: ImportanceConfig = ImportanceConfig()
    regressor: RegressorConfig = RegressorConfig()
    training: TrainConfig = TrainConfig()
    training_set: TrainingSetConfig = TrainingSetConfig()
    template: TemplateConfig = TemplateConfig()
    optimize: OptimizeConfig = OptimizeConfig()
    cpd: CpdConfig = CpdConfig()
    harness: HarnessConfig = HarnessConfig()


class RunConfig(BaseModel):
    """Global options shared by every subcommand."""
    seed: int
    threads: int = Field(default=1, ge=1)
    verbosity: int = 0
    output_dir: Optional[str] = None


# ============ Documents ============

class DemoDocument(BaseModel):
    """A demonstration on disk: geometry paths plus the anchor pose in the source frame."""
    anchor: str
    source: str
    anchor_pose: Matrix4 = IDENTITY4
    splat_radius: Optional[float] = None

    @field_validator("anchor_pose")
    @classmethod
    def _pose_shape(cls, value: Matrix4) -> Matrix4:
        return _check_matrix4(value)


class TemplateDocument(BaseModel):
    version: int = 1
    query_points: List[List[float]]
    descriptors: List[List[float]]
    anchor_pose_ref: Matrix4
    field_fingerprint: str
    config: Dict[str, Any] = {}

    @model_validator(mode="after")
    def _aligned(self) -> "TemplateDocument":
        if len(self.query_points) != len(self.descriptors):
            raise ValueError("one descriptor per query point is required")
        return self


class RestartSummary(BaseModel):
    index: int
    seed: int
    final_residual: float
    best_residual: float
    iterations: int
    converged: bool
    diverged: bool = False
    trace: List[float] = []


class PoseDocument(BaseModel):
    matrix: Matrix4
    anchor_matrix: Matrix4
    residual: float
    field_fingerprint: str
    seed: int
    restarts: List[RestartSummary]


class TrainingMetadata(BaseModel):
    target_kind: TargetKind = TargetKind.SCF
    epochs: int = 0
    loss_curve: List[float] = []
    val_loss_curve: List[float] = []
    heldout_r2: List[float] = []
    heldout_mean_r2: Optional[float] = None
    heldout_accuracy: Optional[float] = None
    seed: int = 0
    scf: Optional[ScfConfig] = None


class FieldHeader(BaseModel):
    """JSON header of the binary weight container."""
    version: int = 1
    activation: Activation
    encoder_shapes: List[List[int]]
    decoder_shapes: List[List[int]]
    include_output_layer: bool = True
    concat_pre_activation: bool = False
    cloud_points: int
    metadata: TrainingMetadata = TrainingMetadata()


class GridSpec(BaseModel):
    """Heatmap sample grid: a full 3D lattice, or a planar slice when slice_axis is set."""
    resolution: int = Field(default=24, ge=2)
    lo: Optional[List[float]] = None
    hi: Optional[List[float]] = None
    slice_axis: Optional[int] = Field(default=None, ge=0, le=2)
    slice_offset: Optional[float] = None

    @field_validator("lo", "hi")
    @classmethod
    def _three_coords(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and len(value) != 3:
            raise ValueError("grid corners need three coordinates")
        return value


class ScfOutput(BaseModel):
    order: int
    dir_count: int
    scheme: DirectionScheme
    points: List[List[float]]
    descriptors: List[List[float]]


class ShapeSpec(BaseModel):
    """Parametric description of a procedural object."""
    kind: ShapeKind
    params: Dict[str, float] = {}
    scale: float = Field(default=1.0, gt=0.0)
    pose: Matrix4 = IDENTITY4
    seed: int = 0

    @field_validator("pose")
    @classmethod
    def _pose_shape(cls, value: Matrix4) -> Matrix4:
        return _check_matrix4(value)


# ============ Benchmark ============

class SuiteEntry(BaseModel):
    """One row group of the method matrix."""
    category: ShapeKind
    demo_category: Optional[ShapeKind] = None
    task: TaskKind = TaskKind.GRASP
    regimes: List[PoseRegime] = [PoseRegime.UPRIGHT, PoseRegime.ARBITRARY]
    methods: List[str] = ["ibs+nif"]
    trials: int = Field(default=20, ge=0)
    demos: int = Field(default=10, ge=1)
    scf_orders: List[int] = [5]

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, value: List[str]) -> List[str]:
        for method in value:
            if method in ("cpd", "self"):
                continue
            parts = method.split("+")
            if len(parts) != 2:
                raise ValueError(f"unknown method id: {method}")
            QueryScheme(parts[0])
            FeatureKind(parts[1])
        return value


class SuiteConfig(BaseModel):
    name: str = "suite"
    seed: int = 0
    entries: List[SuiteEntry] = []
    nif_weights: Optional[str] = None
    ndf_weights: Optional[str] = None
    scf: ScfConfig = ScfConfig(dir_count=600)
    template: TemplateConfig = TemplateConfig(samples=64, ibs=IbsConfig(grid_res=32))
    optimize: OptimizeConfig = OptimizeConfig(restarts=4, max_iters=150)
    cpd: CpdConfig = CpdConfig()
    harness: HarnessConfig = HarnessConfig()
    dump_failures: bool = True


class TrialRecord(BaseModel):
    index: int
    seed: int
    method: str
    category: ShapeKind
    demo_category: ShapeKind
    task: TaskKind
    regime: PoseRegime
    scf_order: int
    residual: float
    penetration: float
    rotation_error_deg: Optional[float] = None
    translation_error_fraction: Optional[float] = None
    penetration_ok: bool
    pose_ok: Optional[bool] = None
    success: bool


class TrialReport(BaseModel):
    """Aggregate of one method over one (category, regime, task, order) cell."""
    method: str
    category: ShapeKind
    demo_category: ShapeKind
    task: TaskKind
    regime: PoseRegime
    scf_order: int
    trials: List[TrialRecord] = []
    success_rate: float = 0.0
    grasp_rate: Optional[float] = None
    place_rate: Optional[float] = None
    overall_rate: float = 0.0


class BenchmarkReport(BaseModel):
    suite: str
    seed: int
    nif_heldout_mean_r2: Optional[float] = None  # quality of the learned field the suite ran with
    reports: List[TrialReport] = []
    checks: Dict[str, Optional[bool]] = {}
