import os


def _env(name: str, default: str) -> str:
    return os.environ.get(f"IMPRINTFIT_{name}", default)


class Config:
    """Production configuration.

    All values are read from the environment at import time (after the package
    has loaded `.env` / `env.local`), so CLI flags only need to override them.
    """

    LOG_LEVEL = _env("LOG_LEVEL", "INFO").upper()

    # Fitting (coordinate ascent)
    EPSILON = float(_env("EPSILON", "1e-5"))
    MAX_ITERS = int(_env("MAX_ITERS", "200"))
    OVERDISP_MIN = float(_env("OVERDISP_MIN", "1e-4"))
    OVERDISP_MAX = float(_env("OVERDISP_MAX", "1e4"))
    EFFECT_BOUND = float(_env("EFFECT_BOUND", "25"))

    # Gene/sample filters
    MIN_ASE = int(_env("MIN_ASE", "0"))
    MIN_TOTAL_MEAN = float(_env("MIN_TOTAL_MEAN", "0"))

    # Testing
    ALPHA = float(_env("ALPHA", "0.05"))
    MC_DRAWS = int(_env("MC_DRAWS", "100000"))
    EXACT_TABLE_LIMIT = int(_env("EXACT_TABLE_LIMIT", "1000000"))

    # Runs
    SEED = int(_env("SEED", "1"))
    THREADS = int(_env("THREADS", "1"))


class DevConfig(Config):
    """Development configuration - verbose logging, otherwise identical."""

    LOG_LEVEL = _env("LOG_LEVEL", "DEBUG").upper()


def select_config():
    """
    Pick the config class.

    - APP_ENV=dev/development -> `DevConfig`
    - APP_ENV=prod/production or unset -> `Config`
    """
    app_env = (os.environ.get("APP_ENV") or "").strip().lower()
    if app_env in {"dev", "development"}:
        return DevConfig
    return Config
