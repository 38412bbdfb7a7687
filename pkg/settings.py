import os
from pathlib import Path

from django.core.exceptions import ImproperlyConfigured
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

BASE_DIR = Path(__file__).resolve().parent

# Only needed because Django insists on one; nothing here is signed
SECRET_KEY = os.getenv('SECRET_KEY', 'fedseg-local-simulator-key')

DEBUG = os.getenv('DEBUG', 'False') == 'True'
ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'fedseg',
]

# The simulator keeps everything in files
DATABASES = {}

USE_TZ = True
DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Worker threads for client-parallel training
try:
    FEDSEG_THREADS = int(os.getenv('FEDSEG_THREADS') or os.cpu_count() or 1)
except ValueError:
    raise ImproperlyConfigured(f"FEDSEG_THREADS must be an integer, got {os.getenv('FEDSEG_THREADS')!r}")
if FEDSEG_THREADS < 1:
    raise ImproperlyConfigured(f"FEDSEG_THREADS must be >= 1, got {FEDSEG_THREADS}")

FEDSEG_LOG_LEVEL = os.getenv('FEDSEG_LOG_LEVEL', 'INFO').upper()
FEDSEG_DATA_DIR = os.getenv('FEDSEG_DATA_DIR', 'data')
FEDSEG_RUNS_DIR = os.getenv('FEDSEG_RUNS_DIR', 'runs')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'fedseg': {
            'handlers': ['console'],
            'level': FEDSEG_LOG_LEVEL,
            'propagate': False,
        },
    },
}
