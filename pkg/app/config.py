from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import List


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="RECON_", extra="ignore")

    # App settings
    app_name: str = "Multiparameter Reconstruction Lab"
    version: str = "1.0.0"
    debug: bool = False

    # Server settings
    host: str = "127.0.0.1"
    port: int = 8001

    # Output settings
    output_dir: str = "outputs"
    logs_dir: str = "logs"

    # Parallelism
    threads: int = 1

    # Increment algebra
    max_dimension: int = 8
    identity_tolerance: float = 1e-12

    # Wavelet settings
    wavelet_family: str = "haar"
    wavelet_depth: int = 12
    cascade_tolerance: float = 1e-10
    eval_level: int = 10  # test functions live on 2^eval_level cells per axis
    support_shift: int = 0

    # Noise settings
    max_field_bytes: int = 2 * 1024 ** 3
    resample_count: int = 64
    fbm_cholesky_cap: int = 512
    fbm_seed: int = 20240611

    # Estimator settings
    base_points: int = 50
    separation_levels: List[int] = [2, 3, 4, 5, 6, 7]
    min_fit_points: int = 4
    rate_tolerance: float = 0.05  # accepted distance of fitted exponents from their targets
    batch_count: int = 20
    conditional_points: int = 16  # base points for conditioned table entries
    bdg_hypothesis_points: int = 16
    bdg_anchor_points: int = 8
    bdg_constant: float = 10.0

    # Reconstruction settings
    cauchy_tolerance: float = 1e-10
    min_decay_slope: float = 0.1
    min_decay_r2: float = 0.9
    consistency_tolerance: float = 1e-10
    crosscheck_tolerance: float = 1e-6  # independent increment path with smooth wavelets
    germ_cache_bytes: int = 256 * 1024 ** 2

    # Calculus settings
    primitive_margin: float = 0.5
    primitive_crosscheck_points: int = 8
    young_min_rate: float = 0.9

    # SPDE settings
    spde_tolerance: float = 1e-8
    spde_max_iter: int = 200
    max_patches: int = 16
    patch_contraction_target: float = 0.5


settings = Settings()
