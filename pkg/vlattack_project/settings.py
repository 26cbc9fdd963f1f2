"""
Django settings for vlattack_project project.
Desk-scale vision-language adversarial attack laboratory
"""
import os
from pathlib import Path

from dotenv import load_dotenv


# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

load_dotenv(BASE_DIR / '.env')

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-vlattack-lab-local-key')

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.getenv('DEBUG', 'True') == 'True'

ALLOWED_HOSTS = os.getenv('ALLOWED_HOSTS', 'localhost,127.0.0.1').split(',')

# Application definition
INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',
    'django.contrib.admin',

    # Laboratory apps
    'modelzoo',      # Toy VL models, training, checkpoints
    'blackbox',      # Query gateway to fine-tuned tasks
    'bsa',           # Block-wise similarity image attack
    'text_attack',   # Word substitution attack
    'icsa',          # Cross-search multimodal attack
    'harness',       # Datasets, evaluation, ablation, reports, CLI
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'vlattack_project.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.debug',
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

# Database - SQLite, holds only the checkpoint and evaluation-run registries
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': os.getenv('VLATTACK_DB_PATH', str(BASE_DIR / 'db.sqlite3')),
    }
}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = os.getenv('TIME_ZONE', 'UTC')
USE_I18N = True
USE_TZ = True

STATIC_URL = '/static/'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

VERSION = '1.0.0'


def _env_float(name, default):
    return float(os.getenv(f'VLATTACK_{name}', default))


def _env_int(name, default):
    return int(os.getenv(f'VLATTACK_{name}', default))


# Laboratory configuration - every field overridable as VLATTACK_<FIELD>
VLATTACK = {
    'CHECKPOINT_DIR': Path(os.getenv('VLATTACK_CHECKPOINT_DIR', BASE_DIR / 'artifacts' / 'checkpoints')),
    'DATA_DIR': Path(os.getenv('VLATTACK_DATA_DIR', BASE_DIR / 'artifacts' / 'data')),
    'REPORT_DIR': Path(os.getenv('VLATTACK_REPORT_DIR', BASE_DIR / 'artifacts' / 'reports')),

    # Attack budget defaults
    'SIGMA_I': _env_float('SIGMA_I', 16 / 255),
    'SIGMA_I_GROUNDING': _env_float('SIGMA_I_GROUNDING', 4 / 255),
    'SIGMA_S': _env_float('SIGMA_S', 0.95),
    'STEPS': _env_int('STEPS', 40),
    'INIT_STEPS': _env_int('INIT_STEPS', 20),
    'STEP_SIZE': _env_float('STEP_SIZE', 0.01),
    'MAX_MODIFIED_WORDS': _env_int('MAX_MODIFIED_WORDS', 1),
    'SUBSTITUTIONS_PER_WORD': _env_int('SUBSTITUTIONS_PER_WORD', 8),
    'MOMENTUM_DECAY': _env_float('MOMENTUM_DECAY', 1.0),

    # Evaluation
    'EVAL_SAMPLES': _env_int('EVAL_SAMPLES', 200),
    'TRAIN_SAMPLES': _env_int('TRAIN_SAMPLES', 4000),
    'HELDOUT_SAMPLES': _env_int('HELDOUT_SAMPLES', 400),
    'WORKERS': _env_int('WORKERS', 1),

    # Toy model
    'MODEL': {
        'image_size': 32,
        'channels': 3,
        'patch_size': 8,
        'width': 64,
        'heads': 4,
        'mlp_ratio': 2,
        'image_blocks': 2,
        'fusion_blocks': 2,
        'decoder_blocks': 2,
        'max_text_length': 12,
        'max_generation_length': 6,
    },

    # Training recipes
    'PRETRAIN': {
        'epochs': _env_int('PRETRAIN_EPOCHS', 20),
        'batch_size': 64,
        'lr': 1e-3,
        'weight_decay': 0.01,
    },
    'FINETUNE': {
        'epochs': _env_int('FINETUNE_EPOCHS', 30),
        'batch_size': 64,
        'lr': 5e-4,
        'weight_decay': 0.01,
        'matching_weight': 0.1,
    },
}

# Logging
LOG_DIR = BASE_DIR / 'logs'
LOG_DIR.mkdir(exist_ok=True)
LOG_LEVEL = os.getenv('VLATTACK_LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
        'file': {
            'level': 'DEBUG',
            'class': 'logging.FileHandler',
            'filename': LOG_DIR / 'vlattack.log',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'file'],
            'level': 'INFO',
            'propagate': True,
        },
        **{
            app: {
                'handlers': ['console', 'file'],
                'level': LOG_LEVEL,
                'propagate': False,
            }
            for app in ['modelzoo', 'blackbox', 'bsa', 'text_attack', 'icsa', 'harness']
        },
    },
}
