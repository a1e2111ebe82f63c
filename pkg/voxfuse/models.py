from pydantic import BaseModel, Field, field_validator
from typing import Optional, List, Tuple


# Module configuration models. Length-valued fields left as None are
# expressed in voxel edges and resolved at use time.

class RenderConfig(BaseModel):
    samples_per_interval: int = Field(default=1, ge=1)
    alpha_valid_min: float = Field(default=0.5, ge=0.0, le=1.0)
    row_block: int = Field(default=32, ge=1)


class PatchSpec(BaseModel):
    size: int = Field(default=8, ge=2)
    stride: int = Field(default=8, ge=1)
    eps_std: float = Field(default=1e-6, gt=0.0)
    masked: bool = Field(default=False)


class TsdfConfig(BaseModel):
    level: int = Field(default=7, ge=1, le=8)
    coarse_levels: int = Field(default=2, ge=0, le=6)
    trunc_voxels: float = Field(default=4.0, gt=0.0)
    tau_q: float = Field(default=0.3, gt=0.0, lt=1.0)
    temperature: float = Field(default=0.5, gt=0.0)
    slab: int = Field(default=8, ge=1)


class BuildConfig(BaseModel):
    density_scale: float = Field(default=20.0, gt=0.0)
    density_sharpness: float = Field(default=0.5, gt=0.0)
    sh_degree: int = Field(default=0, ge=0, le=3)
    base_gray: float = Field(default=0.5, ge=0.0, le=1.0)


class StitchConfig(BaseModel):
    crop_size: int = Field(default=32, ge=2)
    sigma_g: Optional[float] = Field(default=None, gt=0.0)
    eps: float = Field(default=1e-8, gt=0.0)
    windowed: bool = Field(default=True)


class AttentionConfig(BaseModel):
    cos_threshold: float = Field(default=0.0, ge=-1.0, lt=1.0)
    iterations: int = Field(default=2, ge=1)
    token_stride: int = Field(default=4, ge=1)
    row_block: int = Field(default=1024, ge=1)
    enabled: bool = Field(default=True)


class FusionConfig(BaseModel):
    beta: Optional[float] = Field(default=None, gt=0.0)
    sigma_c: Optional[float] = Field(default=None, gt=0.0)
    eps: float = Field(default=1e-8, gt=0.0)
    occlusion_margin: Optional[float] = Field(default=None, ge=0.0)
    batch_size: int = Field(default=4096, ge=1)
    use_confidence: bool = Field(default=True)

    def resolved(self, voxel_edge: float) -> "FusionConfig":
        """Fill unset length fields from the voxel edge (β = 2e, σ_c = e, margin = 2e)."""
        return self.model_copy(update={
            "beta": self.beta if self.beta is not None else 2.0 * voxel_edge,
            "sigma_c": self.sigma_c if self.sigma_c is not None else 1.0 * voxel_edge,
            "occlusion_margin": (
                self.occlusion_margin if self.occlusion_margin is not None else 2.0 * voxel_edge
            ),
        })


class QueryConfig(BaseModel):
    threshold: float = Field(default=0.6, ge=0.0, le=1.0)


class TransferConfig(BaseModel):
    k: int = Field(default=8, ge=1)
    cell_voxels: float = Field(default=2.0, gt=0.0)
    chunk: int = Field(default=2048, ge=1)


class Settings(BaseModel):
    render: RenderConfig = Field(default_factory=RenderConfig)
    patch: PatchSpec = Field(default_factory=PatchSpec)
    tsdf: TsdfConfig = Field(default_factory=TsdfConfig)
    build: BuildConfig = Field(default_factory=BuildConfig)
    stitch: StitchConfig = Field(default_factory=StitchConfig)
    attention: AttentionConfig = Field(default_factory=AttentionConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    query: QueryConfig = Field(default_factory=QueryConfig)
    transfer: TransferConfig = Field(default_factory=TransferConfig)
    threads: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0)


# HTTP service schemas

class HealthResponse(BaseModel):
    status: str
    version: str
    grid_loaded: bool


class GridSummary(BaseModel):
    voxel_count: int
    fused_count: int
    fused_fraction: float
    feature_dim: int
    sh_degree: int
    bounds_min: List[float]
    bounds_max: List[float]
    levels: List[int]


class RelevanceRequest(BaseModel):
    label: Optional[str] = Field(default=None, min_length=1, max_length=200)
    vector: Optional[List[float]] = None
    threshold: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    top: int = Field(default=10, ge=0, le=1000)

    @field_validator("vector")
    @classmethod
    def vector_not_empty(cls, v):
        if v is not None and len(v) == 0:
            raise ValueError("vector must not be empty")
        return v


class VoxelKeyModel(BaseModel):
    level: int
    code: int


class RelevanceResponse(BaseModel):
    label: str
    threshold: float
    mask_size: int
    fused_count: int
    raw_min: float
    raw_max: float
    top_voxels: List[VoxelKeyModel] = []
    top_scores: List[float] = []


class TransferRequest(BaseModel):
    points: List[Tuple[float, float, float]] = Field(..., min_length=1)
    labels: Optional[List[str]] = None
    k: int = Field(default=8, ge=1, le=256)


class TransferResponse(BaseModel):
    class_labels: List[str]
    labels: List[int]
    probabilities: List[List[float]]


class EditRequest(BaseModel):
    label: str = Field(..., min_length=1, max_length=200)
    color: Tuple[float, float, float]
    threshold: Optional[float] = Field(default=None, ge=0.0, le=1.0)

    @field_validator("color")
    @classmethod
    def color_in_unit_range(cls, v):
        if any(c < 0.0 or c > 1.0 for c in v):
            raise ValueError("color components must lie in [0, 1]")
        return v


class EditResponse(BaseModel):
    message: str
    edited_voxels: int
