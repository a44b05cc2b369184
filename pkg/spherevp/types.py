import math
from typing import Annotated, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, model_validator


# Configuration
# ------------------------

IntRange = Tuple[int, int]
FloatRange = Tuple[float, float]


def _check_range(name, bounds, lower=0):
    lo, hi = bounds
    if lo < lower or hi < lo:
        raise ValueError(f"{name} must satisfy {lower} <= lo <= hi, got {bounds}")


class RasterConfig(BaseModel):
    resolution: int = Field(128, ge=16)  # sphere image side S
    grid_n: int = Field(20, ge=2)  # bins per axis N
    theta_act: float = Field(0.05, ge=0.0, lt=1.0)
    sigma_acc: float = Field(0.02, gt=0.0)
    accumulator_supersample: int = Field(5, ge=1)


class SynthConfig(BaseModel):
    k_d_range: IntRange = (1, 6)
    clusters_per_direction: IntRange = (1, 4)
    segments_per_cluster: IntRange = (2, 6)
    outlier_count: IntRange = (0, 10)
    outlier_fraction: Optional[float] = Field(None, ge=0.0, lt=1.0)  # overrides outlier_count when set
    noise_kind: Literal["uniform", "gaussian", "either"] = "either"
    noise_scale_range: FloatRange = (0.0, 0.01)
    focal_range: FloatRange = (0.5, 3.0)
    examples_per_kd: int = Field(6000, ge=1)
    seed: int = 0
    cluster_box: float = Field(4.0, gt=0.0)
    cluster_offset: float = Field(0.3, ge=0.0)
    segment_half_length: FloatRange = (0.3, 1.5)
    min_segment_length: float = Field(0.02, gt=0.0)
    max_retries: int = Field(20, ge=1)
    min_direction_segments: int = Field(3, ge=2)
    min_pencil_spread: float = Field(5e-4, ge=0.0)  # second-smallest eigenvalue of the mean line scatter

    @model_validator(mode="after")
    def _validate_ranges(self):
        _check_range("k_d_range", self.k_d_range, lower=1)
        if self.k_d_range[1] > 6:
            raise ValueError(f"k_d_range must lie within [1, 6], got {self.k_d_range}")
        _check_range("clusters_per_direction", self.clusters_per_direction, lower=1)
        _check_range("segments_per_cluster", self.segments_per_cluster, lower=1)
        _check_range("outlier_count", self.outlier_count)
        _check_range("noise_scale_range", self.noise_scale_range)
        _check_range("segment_half_length", self.segment_half_length)
        lo, hi = self.focal_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"focal_range must be positive and ordered, got {self.focal_range}")
        return self


class TrainConfig(BaseModel):
    learning_rate: float = Field(0.01, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(30, ge=1)
    seed: int = 0
    validation_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    lr_decay: float = Field(0.1, gt=0.0, le=1.0)
    lr_decay_at: float = Field(2.0 / 3.0, gt=0.0, le=1.0)  # fraction of epochs
    recall_k: int = Field(25, ge=1)


class EmConfig(BaseModel):
    k_init: int = Field(25, ge=1)
    sigma_prior: float = Field(math.pi / (1.282 * 20), gt=0.0)
    sigma_em: float = Field(0.02, gt=0.0)
    k_phi: float = Field(9.0, gt=0.0)
    sigma_sim: float = Field(0.2, gt=0.0)
    lambda_mix: float = Field(0.5, ge=0.0, le=1.0)
    eps_weight: float = Field(0.25, ge=0.0, le=1.0)
    f_s: int = Field(5, ge=0)  # 0 disables split-and-merge
    merge_angle: float = Field(math.radians(2.0), gt=0.0)
    max_iters: int = Field(25, ge=1)
    tol: float = Field(1e-4, gt=0.0)
    theta_act: float = Field(0.05, ge=0.0)
    use_prior: bool = True
    # sigma_k = max(sigma_em * sigma_decay^(k-1), sigma_em_min); sigma_decay=1 keeps sigma_em
    sigma_decay: float = Field(0.5, gt=0.0, le=1.0)
    sigma_em_min: float = Field(0.0025, gt=0.0)
    # hard-assignment inlier refits after the soft iterations; 0 disables
    refit_rounds: int = Field(5, ge=0)
    inlier_scale: float = Field(9.0, ge=1.0)  # gate = inlier_scale * median member d2
    min_inlier_d2: float = Field(1e-5, gt=0.0)

    @classmethod
    def for_grid(cls, n, **overrides):
        return cls(sigma_prior=math.pi / (1.282 * n), **overrides)


class HorizonConfig(BaseModel):
    n_vp: int = Field(20, ge=3)
    theta_z: float = Field(math.pi / 4, gt=0.0, lt=math.pi / 2)
    theta_hor: float = Field(math.pi / 6, gt=0.0, lt=math.pi / 2)
    min_vp_separation: float = Field(math.radians(0.5), ge=0.0)
    c: Tuple[float, float] = (0.0, 0.0)


class BenchConfig(BaseModel):
    max_err: float = Field(0.25, gt=0.0)
    curve_samples: int = Field(101, ge=2)
    orthogonal_tolerance: float = Field(math.radians(5.0), gt=0.0)
    workers: Optional[int] = Field(None, ge=1)


class PipelineConfig(BaseModel):
    raster: RasterConfig = Field(default_factory=RasterConfig)
    em: EmConfig = Field(default_factory=EmConfig)
    horizon: HorizonConfig = Field(default_factory=HorizonConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)


# Network description
# ------------------------

class ConvLayer(BaseModel):
    kind: Literal["conv"] = "conv"
    out_channels: int = Field(ge=1)
    kernel: int = Field(ge=1)
    stride: int = Field(1, ge=1)


class ReluLayer(BaseModel):
    kind: Literal["relu"] = "relu"


class MaxPoolLayer(BaseModel):
    kind: Literal["maxpool"] = "maxpool"
    kernel: int = Field(2, ge=1)
    stride: int = Field(2, ge=1)


class FullyConnectedLayer(BaseModel):
    kind: Literal["fully_connected"] = "fully_connected"
    out: int = Field(ge=1)


Layer = Annotated[
    Union[ConvLayer, ReluLayer, MaxPoolLayer, FullyConnectedLayer],
    Field(discriminator="kind"),
]


class NetSpec(BaseModel):
    input_resolution: int = Field(128, ge=1)
    grid_n: int = Field(20, ge=2)
    layers: List[Layer]

    @model_validator(mode="after")
    def _validate_shapes(self):
        self.output_shapes()
        if not self.layers or not isinstance(self.layers[-1], FullyConnectedLayer):
            raise ValueError("Final layer must be fully_connected")
        if self.layers[-1].out != self.grid_n ** 2:
            raise ValueError(
                f"Final layer has {self.layers[-1].out} outputs, expected {self.grid_n ** 2}"
            )
        return self

    def output_shapes(self) -> List[Tuple[int, ...]]:
        """Shape after every layer, starting from a single-channel input."""
        shape: Tuple[int, ...] = (1, self.input_resolution, self.input_resolution)
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (ConvLayer, MaxPoolLayer)):
                if len(shape) != 3:
                    raise ValueError(f"Layer {i} ({layer.kind}) follows a flattened layer")
                c, h, w = shape
                size = (h - layer.kernel) // layer.stride + 1
                if h < layer.kernel or size < 1:
                    raise ValueError(f"Layer {i} ({layer.kind}) kernel exceeds input {h}x{w}")
                channels = layer.out_channels if isinstance(layer, ConvLayer) else c
                shape = (channels, size, size)
            elif isinstance(layer, FullyConnectedLayer):
                shape = (layer.out,)
            shapes.append(shape)
        return shapes


def default_net_spec(grid_n: int = 20, input_resolution: int = 128) -> NetSpec:
    return NetSpec(
        input_resolution=input_resolution,
        grid_n=grid_n,
        layers=[
            ConvLayer(out_channels=16, kernel=5, stride=2),
            ReluLayer(),
            MaxPoolLayer(kernel=2, stride=2),
            ConvLayer(out_channels=32, kernel=3, stride=1),
            ReluLayer(),
            MaxPoolLayer(kernel=2, stride=2),
            ConvLayer(out_channels=64, kernel=3, stride=1),
            ReluLayer(),
            MaxPoolLayer(kernel=2, stride=2),
            FullyConnectedLayer(out=512),
            ReluLayer(),
            FullyConnectedLayer(out=grid_n ** 2),
        ],
    )


# Files
# ------------------------

class SegmentsFile(BaseModel):
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    segments: List[Tuple[float, float, float, float]]  # pixel coordinates


class GroundTruthFile(BaseModel):
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    horizon: Tuple[Tuple[float, float], Tuple[float, float]]
    vps: Optional[List[Tuple[float, float]]] = None

    @model_validator(mode="after")
    def _distinct_horizon_points(self):
        if self.horizon[0] == self.horizon[1]:
            raise ValueError("Ground-truth horizon points must be distinct")
        return self


class CameraDocument(BaseModel):
    R: List[List[float]]
    t: List[float]
    f: float


class SceneFile(BaseModel):
    k_d: int
    camera: CameraDocument
    true_vps: List[Tuple[float, float]]  # (alpha, beta)
    segments: List[Tuple[float, float, float, float]]  # normalized coordinates
    labels: List[int]
    horizon: Optional[Tuple[float, float, float]] = None


class ManifestEntry(BaseModel):
    file: str
    k_d: int
    seed: int
    index: int


# Results
# ------------------------

class VpDocument(BaseModel):
    v: Tuple[float, float, float]
    alpha: float
    beta: float
    support: int
    image_point: Optional[Tuple[float, float]] = None  # normalized, None at infinity
    pixel: Optional[Tuple[float, float]] = None


class HorizonDocument(BaseModel):
    h: Tuple[float, float, float]  # normalized image coordinates
    endpoints: Tuple[Tuple[float, float], Tuple[float, float]]  # pixels at x=0, x=width
    no_triplet: bool = False
    triplet: Optional[Tuple[int, int, int]] = None
    zenith: Optional[int] = None
    score: Optional[float] = None


class DetectionDocument(BaseModel):
    width: int
    height: int
    predictor: str
    vps: List[VpDocument]
    line_labels: List[int]
    horizon: HorizonDocument
    iterations: int
    timings: dict = Field(default_factory=dict)


class BenchSummary(BaseModel):
    auc: float
    mean_err: float
    median_err: float
    orthogonal_accuracy_at_5deg: Optional[float] = None
    images: int
    failures: int
    max_err: float
    wall_time: float


class VanishingPointsFile(BaseModel):
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    vps: List[Tuple[float, float]] = Field(min_length=2)  # pixel coordinates
