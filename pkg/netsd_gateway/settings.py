"""
Django settings for netsd_gateway project.

The gateway has no database and no templates: it serves a JSON/octet-stream
API next to an NBD listener, both backed by one emulated SD card. Everything
site-specific is read through python-decouple, so a `.env` file or the
process environment can retune the card, the bus and the listeners.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import sys
from pathlib import Path
from decouple import config, Csv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

TESTING = len(sys.argv) > 1 and sys.argv[1] == 'test'


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config('SECRET_KEY', default='django-insecure-netsd-gateway-development-only')

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = config('DEBUG', default=False, cast=bool)

ALLOWED_HOSTS = config('ALLOWED_HOSTS', default='127.0.0.1,localhost,testserver', cast=Csv())

# Application definition

INSTALLED_APPS = [
    'netsd.apps.NetsdConfig',
]

MIDDLEWARE = [
    "django.middleware.security.SecurityMiddleware",
    "django.middleware.common.CommonMiddleware",
]

ROOT_URLCONF = "netsd_gateway.urls"

WSGI_APPLICATION = "netsd_gateway.wsgi.application"


# No models: the card image is the only persistent state.
DATABASES = {}


LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

# django-ratelimit keeps its counters here
CACHES = {
    'default': {
        'BACKEND': 'django.core.cache.backends.locmem.LocMemCache',
        'LOCATION': 'netsd-ratelimit',
    }
}

# Raw block and file bodies go straight to the card
DATA_UPLOAD_MAX_MEMORY_SIZE = config('DATA_UPLOAD_MAX_MEMORY_SIZE', default=64 * 1024 * 1024, cast=int)


# NETSD GATEWAY
# Keys mirror the short names accepted by `serve --config FILE`
NETSD = {
    'IMAGE': config('NETSD_IMAGE', default=str(BASE_DIR / 'var' / 'sd.img')),
    'CAPACITY': config('NETSD_CAPACITY', default='64MiB'),
    'IN_MEMORY': config('NETSD_IN_MEMORY', default=False, cast=bool),
    'LISTEN_ADDR': config('NETSD_LISTEN_ADDR', default='127.0.0.1'),
    'NBD_PORT': config('NETSD_NBD_PORT', default=10809, cast=int),
    'HTTP_PORT': config('NETSD_HTTP_PORT', default=8080, cast=int),
    'PULLUPS': config('NETSD_PULLUPS', default=False, cast=bool),
    'CABLE_CM': config('NETSD_CABLE_CM', default=48.0, cast=float),
    'SAFE_LAYOUT': config('NETSD_SAFE_LAYOUT', default=True, cast=bool),
    'HOST_UHS': config('NETSD_HOST_UHS', default=True, cast=bool),
    'SEED': config('NETSD_SEED', default=0, cast=int),
    'PORTS': config('NETSD_PORTS', default='dut,rag', cast=Csv()),
    'DEFAULT_PORT': config('NETSD_DEFAULT_PORT', default='dut'),
    'RAG_PORT': config('NETSD_RAG_PORT', default='rag'),
    'HOLD_TIMEOUT': config('NETSD_HOLD_TIMEOUT', default=30.0, cast=float),
    'GRANT_WAIT': config('NETSD_GRANT_WAIT', default=10.0, cast=float),
    'REPOWER_ON_SWITCH': config('NETSD_REPOWER_ON_SWITCH', default=True, cast=bool),
    'RETRY_LIMIT': config('NETSD_RETRY_LIMIT', default=16, cast=int),
    'CHUNK_SIZE': config('NETSD_CHUNK_SIZE', default='8KiB'),
    'EXPORT_NAME': config('NETSD_EXPORT_NAME', default='netsd'),
    'READ_ONLY': config('NETSD_READ_ONLY', default=False, cast=bool),
    'EVENT_LOG': config('NETSD_EVENT_LOG', default=''),
    'POWER_CYCLE_RATE': config('NETSD_POWER_CYCLE_RATE', default='30/m'),
}


# LOGGING
# netsd.events carries the switch/fault transition log as key=value lines
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
            'style': '{',
        },
        'event': {
            'format': '{asctime} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': 'INFO',
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
        'events': {
            'level': 'INFO',
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stdout',
            'formatter': 'event',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': 'INFO',
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
        'netsd.events': {
            'handlers': ['events'],
            'level': 'INFO',
            'propagate': False,
        },
    },
}

if NETSD['EVENT_LOG']:
    LOGGING['handlers']['events'] = {
        'level': 'INFO',
        'class': 'logging.FileHandler',
        'filename': NETSD['EVENT_LOG'],
        'formatter': 'event',
    }

# Keep the test runner output readable; the suites audit EventLog directly.
if TESTING:
    LOGGING['root']['level'] = 'WARNING'
    LOGGING['loggers']['netsd.events']['level'] = 'WARNING'
    LOGGING['loggers']['netsd'] = {
        'handlers': ['console'],
        'level': 'WARNING',
        'propagate': False,
    }
