"""
Django settings for surfel_project project.

The project hosts the surfel reconstruction engine: every module is a Django
app, experiments run as management commands and each run is recorded in the
database.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

from pathlib import Path
import os
from dotenv import load_dotenv

load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-default-key')

DEBUG = os.getenv('DEBUG', 'True') == 'True'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'rest_framework',
    'surfels',
    'splatting',
    'sdf',
    'objectives',
    'densification',
    'scenes',
    'training',
    'runs',
]


# Database
# Run records live in SQLite unless MySQL credentials are provided.

if os.getenv('DB_NAME'):
    DATABASES = {
        'default': {
            'ENGINE': 'django.db.backends.mysql',
            'NAME': os.getenv('DB_NAME'),
            'USER': os.getenv('DB_USER'),
            'PASSWORD': os.getenv('DB_PASSWORD'),
            'HOST': os.getenv('DB_HOST'),
            'PORT': os.getenv('DB_PORT'),
        }
    }
else:
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


# Reconstruction engine

SURFEL_THREADS = int(os.getenv('SURFEL_THREADS', 8))
SURFEL_OUTPUT_ROOT = Path(os.getenv('SURFEL_OUTPUT_ROOT', BASE_DIR / 'outputs'))
SURFEL_PRESETS_DIR = BASE_DIR / 'presets'
SURFEL_VERSION = os.getenv('SURFEL_VERSION', '0.4.0')


# Logging

LOG_LEVEL = os.getenv('SURFEL_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        app: {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        }
        for app in ('surfels', 'splatting', 'sdf', 'objectives', 'densification', 'scenes', 'training', 'runs')
    },
}

# Default primary key field type

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'
