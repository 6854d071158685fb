"""
Django settings for the urbmsite project.

The project hosts a single app, `dynamics`, driven from the `urbm_dyn`
management command. There is no HTTP surface; the database only backs the
run registry.
"""

import os

# Build paths inside the project like this: os.path.join(BASE_DIR, ...)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

SECRET_KEY = os.getenv("URBM_DYN_SECRET_KEY", "urbm-dyn-local-only-not-secret")

DEBUG = os.getenv("URBM_DYN_DEBUG", "0") == "1"

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "dynamics",
]


# Database
# Run registry storage; override the path with URBM_DYN_DB.

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": os.getenv("URBM_DYN_DB", os.path.join(BASE_DIR, "db.sqlite3")),
    }
}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# Low-level cache for oracle ground states (keyed by Hamiltonian fingerprint)

CACHES = {
    "default": {
        "BACKEND": "django.core.cache.backends.locmem.LocMemCache",
        "LOCATION": "urbm-dyn-oracles",
        "OPTIONS": {"MAX_ENTRIES": 256},
    }
}


# Experiment runtime knobs

URBM_DYN_WORKERS = int(os.getenv("URBM_DYN_WORKERS", "1"))
# URBM_DYN_EXACT_MAX_SITES and URBM_DYN_LINDBLAD_MAX_SITES are read from the
# environment by tvmc and open_dynamics.


# Logging

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        "dynamics": {
            "handlers": ["console"],
            "level": os.getenv("URBM_DYN_LOG_LEVEL", "INFO"),
            "propagate": False,
        },
    },
}


# Internationalization

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = True

USE_TZ = True
