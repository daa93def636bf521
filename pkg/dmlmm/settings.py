"""
Django settings for the dmlmm project.

Process-level settings only (logging, numerical floors). Run parameters come
from the run configuration file handled by the cli app, never from here.
"""

import os
from pathlib import Path
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Management commands only; nothing is served.
SECRET_KEY = config('SECRET_KEY', default='dmlmm-insecure-local-key-not-used-for-serving')

DEBUG = config('DEBUG', default=True, cast=bool)

ALLOWED_HOSTS = []

# Application definition
DJANGO_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
]

THIRD_PARTY_APPS = [
    'rest_framework',
]

LOCAL_APPS = [
    'gmm',
    'basis',
    'dmfa',
    'vi',
    'predict',
    'simlab',
    'cli',
]

INSTALLED_APPS = DJANGO_APPS + THIRD_PARTY_APPS + LOCAL_APPS

# Database
# Nothing is persisted in a database; SQLite keeps Django's checks satisfied.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Django REST Framework (serializers are used as JSON schemas only)
REST_FRAMEWORK = {
    'COERCE_DECIMAL_TO_STRING': False,
    'UNAUTHENTICATED_USER': None,
}

# Numerical floors shared by the library
# Variance floor for every variational factor after an update
DMLMM_POSITIVITY_FLOOR = config('DMLMM_POSITIVITY_FLOOR', default=1e-10, cast=float)
# Log-density floor used by the Monte Carlo KL estimator
DMLMM_KL_LOG_FLOOR = config('DMLMM_KL_LOG_FLOOR', default=-700.0, cast=float)

# Logging
LOG_LEVEL = config('LOG_LEVEL', default='INFO')
LOG_DIR = Path(config('LOG_DIR', default=str(BASE_DIR / 'logs')))

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'file': {
            'level': 'INFO',
            'class': 'logging.FileHandler',
            'filename': LOG_DIR / 'dmlmm.log',
            'delay': True,
            'formatter': 'verbose',
        },
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console', 'file'] if not DEBUG else ['console'],
        'level': LOG_LEVEL,
    },
}

# Create logs directory
if not DEBUG:
    os.makedirs(LOG_DIR, exist_ok=True)
