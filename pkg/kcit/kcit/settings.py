"""
Django settings for the kcit project.

The project has no web surface. Django supplies configuration, logging,
management commands (the CLI) and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/6.0/ref/settings/
"""
import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.getenv("KCIT_SECRET_KEY", "kcit-local-only-not-used-for-signing")

DEBUG = os.getenv("KCIT_DEBUG", "0") == "1"

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    # Third-party apps
    "rest_framework",
    # Local apps
    "kernels",
    "nulldist",
    "uitest",
    "citest",
    "causal",
    "synth",
    "experiments",
]

# Internationalization
LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True

# Reports are plain JSON, no browsable renderer
REST_FRAMEWORK = {
    "DEFAULT_RENDERER_CLASSES": ["rest_framework.renderers.JSONRenderer"],
    "UNAUTHENTICATED_USER": None,
}

# ======================================================
# Kernel independence test configuration
# ======================================================

KCI_CONFIG = {
    # p-value method: gamma, mc or both
    "METHOD": os.getenv("KCIT_METHOD", "gamma"),
    # Monte Carlo draws of the weighted chi-square null
    "MC_DRAWS": int(os.getenv("KCIT_MC_DRAWS", 5000)),
    # Base seed for Monte Carlo and replication seeds
    "SEED": int(os.getenv("KCIT_SEED", 0)),
    # Significance level
    "ALPHA": float(os.getenv("KCIT_ALPHA", 0.05)),
    # Absolute eigenvalue cutoff for every spectral truncation
    "EIG_THRESHOLD": float(os.getenv("KCIT_EIG_THRESHOLD", 1e-5)),
    # Points used by the median heuristic
    "MEDIAN_SUBSAMPLE_CAP": int(os.getenv("KCIT_MEDIAN_SUBSAMPLE_CAP", 500)),
    # Conditioning dimension from which GP hyperparameter search is used
    "GP_THRESHOLD": int(os.getenv("KCIT_GP_THRESHOLD", 3)),
    # Ridge regularization for small conditioning sets
    "EPSILON": float(os.getenv("KCIT_EPSILON", 1e-3)),
    # Feature columns used as GP pseudo-outputs
    "GP_MAX_OUTPUTS": int(os.getenv("KCIT_GP_MAX_OUTPUTS", 8)),
    # Worker pool size for Monte Carlo shards and replications
    "WORKERS": int(os.getenv("KCIT_WORKERS", 1)),
}

# ======================================================
# Logging
# ======================================================

LOG_DIR = BASE_DIR / "logs"
LOG_DIR.mkdir(exist_ok=True)

LOG_LEVEL = os.getenv("KCIT_LOG_LEVEL", "INFO")

LOGGING = {
    "version": 1,
    # Keep existing loggers (Django's built-in loggers)
    "disable_existing_loggers": False,
    "formatters": {
        # Verbose format: used for files
        "verbose": {
            "format": "{levelname} {asctime} {module} {process:d} {thread:d} {message}",
            "style": "{",
        },
        # simple format used on the console
        "simple": {
            "format": "{levelname} {message}",
            "style": "{",
        },
        # Custom format with function name and line number
        "detailed": {
            "format": "{levelname} {asctime} {module}:{funcName}:{lineno} - {message}",
            "style": "{",
        },
    },
    "handlers": {
        # Console handler - stderr, keeps stdout free for reports
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "simple",
            "level": LOG_LEVEL,
        },
        # File handler - writes to rotating file
        "file": {
            "class": "logging.handlers.RotatingFileHandler",
            "filename": str(LOG_DIR / "kcit_debug.log"),
            "maxBytes": 1024 * 1024 * 15,  # 15MB
            "backupCount": 10,
            "formatter": "verbose",
            "level": "DEBUG",
        },
        # Error file handler - only errors and critical
        "error_file": {
            "class": "logging.handlers.RotatingFileHandler",
            "filename": str(LOG_DIR / "kcit_errors.log"),
            "maxBytes": 1024 * 1024 * 10,  # 10MB
            "backupCount": 5,
            "formatter": "detailed",
            "level": "ERROR",
        },
    },
    "loggers": {
        "django": {
            "handlers": ["console", "file"],
            "level": "INFO",
            "propagate": False,
        },
        # Numerical core
        "kernels": {"handlers": ["console", "file"], "level": "DEBUG", "propagate": False},
        "nulldist": {"handlers": ["console", "file"], "level": "DEBUG", "propagate": False},
        # Tests
        "uitest": {
            "handlers": ["console", "file", "error_file"],
            "level": "DEBUG",
            "propagate": False,
        },
        "citest": {
            "handlers": ["console", "file", "error_file"],
            "level": "DEBUG",
            "propagate": False,
        },
        # Structure learning
        "causal": {
            "handlers": ["console", "file", "error_file"],
            "level": "DEBUG",
            "propagate": False,
        },
        "synth": {"handlers": ["console", "file"], "level": "DEBUG", "propagate": False},
        # Commands and experiment drivers
        "experiments": {
            "handlers": ["console", "file", "error_file"],
            "level": "DEBUG",
            "propagate": False,
        },
    },
    # Root logger - catches everything not handled by specific loggers
    "root": {
        "handlers": ["console", "file"],
        "level": "INFO",
    },
}
