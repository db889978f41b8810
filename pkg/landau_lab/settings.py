import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent

DEBUG = os.environ.get('LANDAU_LAB_DEBUG', 'False') == 'True'

SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', 'landau-lab-local')

# Из Django используются формы и маршруты, база данных не нужна
INSTALLED_APPS = [
    'particles.apps.ParticlesConfig',
]

ROOT_URLCONF = 'particles.urls'

DATABASES = {}

USE_I18N = False
USE_TZ = True
TIME_ZONE = 'UTC'

# Каталог для результатов прогонов
OUTPUT_DIR = Path(os.environ.get('LANDAU_LAB_OUTPUT_DIR', BASE_DIR / 'runs'))

# Число процессов для параллельных реплик
WORKERS = int(os.environ.get('LANDAU_LAB_WORKERS', '1'))

# Сколько строк частиц обрабатывать одним векторизованным блоком парных сумм
ROW_CHUNK = int(os.environ.get('LANDAU_LAB_ROW_CHUNK', '64'))

DEFAULT_CONFIG = Path(os.environ.get(
    'LANDAU_LAB_DEFAULT_CONFIG',
    BASE_DIR / 'particles' / 'configs' / 'maxwellian_d2.json',
))

LOG_LEVEL = os.getenv('LANDAU_LAB_LOG_LEVEL', 'DEBUG' if DEBUG else 'INFO')

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
        'particles': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
        },
        'landau_lab': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
        },
    },
}
