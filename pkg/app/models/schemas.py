from pydantic import BaseModel, Field, model_validator
from typing import Any, Dict, List, Optional
from datetime import datetime
from enum import Enum


class RateFit(BaseModel):
    slope: float = Field(..., description="Least-squares slope on log2 scales")
    intercept: float = Field(..., description="Intercept on log2 scales")
    r2: float = Field(..., description="Coefficient of determination")
    separations: List[float] = Field(..., description="Scales used in the fit")
    values: List[float] = Field(..., description="Fitted quantities at each scale")
    axis: Optional[int] = Field(None, description="1-based axis the fit belongs to, if any")


class SeminormEntry(BaseModel):
    theta: List[int] = Field(..., description="Directions of the rectangular increment")
    eta: List[int] = Field(default_factory=list, description="Conditioned directions")
    value: float = Field(..., description="Estimated seminorm (sup of the normalized ratios)")
    se: float = Field(0.0, description="Standard error of the maximizing ratio")
    fit: Optional[RateFit] = Field(None, description="Fit of the increment size against the separation")
    axis_fits: List[RateFit] = Field(default_factory=list, description="Fits with one axis scale varied")
    flagged: bool = Field(False, description="Entry computed with a fallback")


class SeminormTable(BaseModel):
    alpha: List[float]
    delta: List[float] = Field(default_factory=list)
    m: float = 2.0
    entries: List[SeminormEntry] = Field(default_factory=list)
    flags: List[str] = Field(default_factory=list)

    def entry(self, theta: List[int], eta: Optional[List[int]] = None) -> SeminormEntry:
        eta = eta or []
        for e in self.entries:
            if e.theta == list(theta) and e.eta == list(eta):
                return e
        raise KeyError(f"No entry for theta={theta}, eta={eta}")


class DistributionNormReport(BaseModel):
    value: float = Field(..., description="Estimated norm")
    entries: List[SeminormEntry] = Field(default_factory=list, description="Per-eta suprema")
    fits: List[RateFit] = Field(default_factory=list, description="Per-axis lambda fits of the unconditioned size")
    skipped: int = Field(0, description="Sample points skipped for support violations")
    flags: List[str] = Field(default_factory=list)


class CoherenceReport(BaseModel):
    value: float
    entries: List[SeminormEntry] = Field(default_factory=list)
    skipped: int = 0
    flags: List[str] = Field(default_factory=list)


class BdgReport(BaseModel):
    theta: List[int]
    eta: List[int]
    lhs: float
    lhs_se: float
    rhs: float
    ratio: float
    a: List[float] = Field(..., description="Fitted per-axis unconditioned constants")
    b: List[float] = Field(..., description="Fitted per-axis conditioned constants")
    c: float = Field(..., description="Fitted constant of the conditional-hypothesis bound")
    violated: bool = Field(False, description="LHS exceeds C*RHS beyond Monte Carlo error")
    constant: Optional[float] = Field(None, description="Universal constant the check was run against")
    anchor: List[float] = Field(default_factory=list, description="Corner y of the reported index box")
    anchors: int = Field(1, description="Anchors checked, the origin included")


class EmbeddingReport(BaseModel):
    alpha_low: List[float]
    alpha_high: List[float]
    low_norm: float
    high_norm: float
    bound: float
    passed: bool


class ConvergenceLog(BaseModel):
    levels: List[int] = Field(default_factory=list)
    increments: List[float] = Field(default_factory=list, description="L2 norms of successive differences")
    increment_se: List[float] = Field(default_factory=list)
    fit: Optional[RateFit] = None
    converged: bool = False
    diverged: bool = False


class CharacterizationReport(BaseModel):
    identity_error: float = Field(..., description="max |R^empty - F_x| over samples")
    independence_error: float = Field(..., description="max change of R^theta under moves of x_theta")
    measurability_error: Optional[float] = Field(None, description="max change under masking future cells")
    scaling_fits: Dict[str, RateFit] = Field(default_factory=dict, description="lambda fits keyed by theta/eta")
    predicted: Dict[str, float] = Field(default_factory=dict)
    regularity_fit: Optional[RateFit] = None
    passed: bool = True
    flags: List[str] = Field(default_factory=list)


class ExperimentKind(str, Enum):
    NOISE_RATES = "noise-rates"
    RECONSTRUCT = "reconstruct"
    WALSH_CHECK = "walsh-check"
    YOUNG_CHECK = "young-check"
    PRIMITIVE_CHECK = "primitive-check"
    SPDE_SOLVE = "spde-solve"
    SPDE_RATES = "spde-rates"
    SEWING_BRIDGE = "sewing-bridge"
    IDENTITY_SUITE = "identity-suite"


class WaveletConfig(BaseModel):
    family: str = "haar"
    r: Optional[int] = None
    depth: int = 12


class SpdeConfig(BaseModel):
    sigma: str = Field("lipschitz", description="zero | one | linear | lipschitz")
    f: float = Field(0.5, description="Constant coefficient field f")
    driver: str = Field("frozen_fbm_sheet", description="smooth_poly | trig | frozen_fbm_sheet")
    hurst: float = 0.75
    alpha: float = 0.45
    beta: float = 0.75
    delta: float = 0.25
    v0: float = 1.0
    tol: float = 1e-8
    max_iter: int = 200
    patching: bool = False
    override: bool = Field(False, description="Run outside the well-posedness exponent range")
    levels: List[int] = Field(default_factory=lambda: [16, 32, 64, 128, 256])


_REQUIRED = {
    ExperimentKind.IDENTITY_SUITE: ("d",),
    ExperimentKind.NOISE_RATES: ("N", "M"),
    ExperimentKind.RECONSTRUCT: ("N", "M"),
    ExperimentKind.WALSH_CHECK: ("N", "M"),
    ExperimentKind.YOUNG_CHECK: ("N",),
    ExperimentKind.PRIMITIVE_CHECK: ("N", "M"),
    ExperimentKind.SPDE_SOLVE: ("N", "M"),
    ExperimentKind.SPDE_RATES: ("M",),
    ExperimentKind.SEWING_BRIDGE: ("N", "M"),
}


class ExperimentConfig(BaseModel):
    kind: ExperimentKind
    seed: int = Field(..., ge=0, lt=2 ** 64, description="Single source of all randomness")
    N: Optional[int] = Field(None, gt=0, description="Cells per axis")
    M: Optional[int] = Field(None, gt=0, description="Monte Carlo samples")
    T: float = Field(1.0, gt=0)
    d: int = Field(2, ge=1, le=8)
    n_max: Optional[int] = Field(None, ge=1, description="Finest reconstruction level")
    level: Optional[int] = Field(None, ge=0, description="Fixed wavelet level")
    samples: int = Field(100, gt=0, description="Random functions for identity checks")
    output_dir: Optional[str] = None
    wavelet: WaveletConfig = Field(default_factory=WaveletConfig)
    spde: SpdeConfig = Field(default_factory=SpdeConfig)

    @model_validator(mode="after")
    def check_required(self):
        missing = [name for name in _REQUIRED[self.kind] if getattr(self, name) is None]
        if missing:
            raise ValueError(f"Experiment kind '{self.kind.value}' requires: {', '.join(missing)}")
        if self.N is not None and self.N & (self.N - 1):
            raise ValueError(f"N must be a power of two, got {self.N}")
        return self


class Manifest(BaseModel):
    kind: str
    config_hash: str
    seed: int
    versions: Dict[str, str]
    wall_time: float
    timestamp: datetime = Field(default_factory=datetime.now)
    artifacts: List[str] = Field(default_factory=list)
    status: str = "ok"
    diagnostics: Dict[str, Any] = Field(default_factory=dict)


class RunResponse(BaseModel):
    kind: str = Field(..., description="Experiment kind that was run")
    status: str = Field(..., description="ok or diverged")
    output_dir: str = Field(..., description="Directory holding the artifacts")
    artifacts: List[str] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict, description="Headline numbers of the run")
    processing_time: float = Field(..., description="Processing time in seconds")


class ErrorResponse(BaseModel):
    error: str = Field(..., description="Error message")
    detail: Optional[str] = Field(None, description="Detailed error information")
    timestamp: datetime = Field(default_factory=datetime.now)


class HealthResponse(BaseModel):
    status: str = Field(..., description="Health status")
    version: str = Field(..., description="API version")
    wavelet_family: str = Field(..., description="Default wavelet family")
    threads: int = Field(..., description="Worker threads for sampling")
    experiment_kinds: List[str] = Field(..., description="Supported experiment kinds")
