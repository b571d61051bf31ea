# lyapforge/settings.py

from pathlib import Path
from decouple import config
import dj_database_url

# Build paths
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = config("SECRET_KEY", default='lyapforge-local-key-not-for-deployment')
DEBUG = config("DEBUG", default=False, cast=bool)

ALLOWED_HOSTS = []

# Application definition
INSTALLED_APPS = [
    'django.contrib.contenttypes',

    # Local apps
    'networks',
    'experiments',
]

# Run registry database. Defaults to a local sqlite file next to manage.py
DATABASES = {
    'default': dj_database_url.config(
        default=config('DATABASE_URL', default=f"sqlite:///{BASE_DIR / 'db.sqlite3'}"),
        conn_max_age=0,
    )
}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

USE_TZ = True
TIME_ZONE = "UTC"

# Workbench
# 0 means "use every core"
LYAPFORGE_THREADS = config("LYAPFORGE_THREADS", default=0, cast=int)
LYAPFORGE_OUTPUT_DIR = Path(config("LYAPFORGE_OUTPUT_DIR", default=str(BASE_DIR / 'runs')))
LYAPFORGE_LOG_LEVEL = config("LYAPFORGE_LOG_LEVEL", default='INFO')
LYAPFORGE_ACCEPTANCE = config("LYAPFORGE_ACCEPTANCE", default=False, cast=bool)

# Logging: progress goes to stderr, stdout stays parseable
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'stream': 'ext://sys.stderr',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'lyapforge': {
            'handlers': ['console'],
            'level': LYAPFORGE_LOG_LEVEL,
            'propagate': False,
        },
        'networks': {
            'handlers': ['console'],
            'level': LYAPFORGE_LOG_LEVEL,
            'propagate': False,
        },
        'experiments': {
            'handlers': ['console'],
            'level': LYAPFORGE_LOG_LEVEL,
            'propagate': False,
        },
    },
}
