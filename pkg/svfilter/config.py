from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    # ── Pipelines ─────────────────────────────────────────────────────────
    # Stage-A variance as a fraction of the map-wide elongation bound.
    SIGMA_FRACTION: float = 0.5
    NEAR_ISOTROPIC: float = 1.01           # below this elongation, dual routes to THETA
    CLAMP_FRACTION: float = 0.95           # clamp policy: elongation = fraction × bound

    # ── Engine ────────────────────────────────────────────────────────────
    # Narrower boxes make w = 1/(a1·a2·a3·a4) blow up rounding in the taps.
    MIN_SCALE: float = 0.3                 # pixels
    NORMALIZE_DC: bool = True
    PIXEL_BLOCK: int = 4096                # pixels per mesh-application work unit
    THREADS: int = 0                       # 0 = os.cpu_count()

    # ── Numerics ──────────────────────────────────────────────────────────
    MAX_EIGEN_RATIO: float = 1e6
    SOLVER_REL_TOL: float = 1e-12          # golden-section width / feasible width
    TABLE_PITCH: float = 0.02              # pixels, continuous-domain tables

    model_config = {
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "env_prefix": "SVFILTER_",
    }


settings = Settings()
