"""
Django settings for the MoEKD pipeline project.
Command-line only: no URL routing, no database, no web surface.
"""

import os
from pathlib import Path

# Build paths inside the project
BASE_DIR = Path(__file__).resolve().parent.parent

# Console logging is chattier with DEBUG=True
DEBUG = os.environ.get('DEBUG', 'False') == 'True'

# Nothing is signed or served; Django only refuses to start without one
SECRET_KEY = os.environ.get('SECRET_KEY', 'moekd-cli-not-secret')

# ============================================================================
# INSTALLED APPS
# ============================================================================

INSTALLED_APPS = [
    'moekd.apps.MoekdConfig',

    # Third-party apps
    'rest_framework',
]

# ============================================================================
# TEMPLATES (plain-text reports)
# ============================================================================

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'autoescape': False,
            'context_processors': [],
        },
    },
]

# ============================================================================
# DATABASE
# ============================================================================

# Every artifact lives on disk under the workdir; nothing is stored in a database.
DATABASES = {}

# ============================================================================
# PIPELINE PATHS
# ============================================================================

# Environment variables only ever override paths, never hyperparameters.
# MOEKD_WORKDIR replaces the "workdir" entry of the pipeline config when set.
MOEKD_WORKDIR = os.environ.get('MOEKD_WORKDIR') or None

# Bundled benchmark config used by `manage.py moekd run` when --config is omitted
MOEKD_DEFAULT_CONFIG = BASE_DIR / 'configs' / 'benchmark.json'

# ============================================================================
# REST FRAMEWORK (serializers only, used for record and config validation)
# ============================================================================

REST_FRAMEWORK = {
    'DEFAULT_AUTHENTICATION_CLASSES': [],
    'DEFAULT_PERMISSION_CLASSES': [],
    'UNAUTHENTICATED_USER': None,
}

# ============================================================================
# INTERNATIONALIZATION
# ============================================================================

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

# ============================================================================
# LOGGING CONFIGURATION
# ============================================================================

# Create logs directory if it doesn't exist
LOGS_DIR = Path(os.environ.get('MOEKD_LOG_DIR', BASE_DIR / 'logs'))
LOGS_DIR.mkdir(parents=True, exist_ok=True)

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '[{levelname}] {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '[{levelname}] {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG' if DEBUG else 'INFO',
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
        'file': {
            'level': 'INFO',
            'class': 'logging.handlers.RotatingFileHandler',
            'filename': LOGS_DIR / 'moekd.log',
            'maxBytes': 1024 * 1024 * 10,  # 10 MB
            'backupCount': 5,
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'file'],
            'level': 'WARNING',
            'propagate': False,
        },
        'moekd': {
            'handlers': ['console', 'file'],
            'level': 'DEBUG' if DEBUG else 'INFO',
            'propagate': False,
        },
    },
}
