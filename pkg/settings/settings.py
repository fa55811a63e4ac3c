import os
from pathlib import Path

"""
Django settings for the block serving simulator project.

Generated by 'django-admin startproject' using Django 5.2.4.

For more information on this file, see
https://docs.djangoproject.com/en/5.2/topics/settings/

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""


# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('SECRET_KEY', 'INSECURE')  # noqa

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = True if os.environ.get('DEBUG') == '1' else False

ALLOWED_HOSTS = os.environ.get('ALLOWED_HOSTS', '*').split(',')


# Application definition
PLUGINS_EXTENSIONS = [
    'rest_framework',
]

APPS = [
    'app_engine.apps.AppEngineConfig',
    'app_zoo.apps.AppZooConfig',
    'app_cluster.apps.AppClusterConfig',
    'app_kv.apps.AppKvConfig',
    'app_agents.apps.AppAgentsConfig',
    'app_scheduler.apps.AppSchedulerConfig',
    'app_workload.apps.AppWorkloadConfig',
    'app_metrics.apps.AppMetricsConfig',
    'app_scenarios.apps.AppScenariosConfig',
]

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
] + PLUGINS_EXTENSIONS + APPS


# Database
# O simulador não persiste nada; o banco existe apenas para o Django subir.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}


# Internationalization
LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Simulação
# Todos os valores podem ser sobrescritos por variáveis de ambiente (.env).
SIMULATION = {
    'EVENT_BUDGET': int(os.environ.get('SIM_EVENT_BUDGET', 50_000_000)),
    'TOKENS_PER_PAGE': int(os.environ.get('SIM_TOKENS_PER_PAGE', 16)),
    'RECOMPUTE_CHUNK_TOKENS': int(
        os.environ.get('SIM_RECOMPUTE_CHUNK_TOKENS', 256)
    ),
    'REVIEW_PERIOD_S': float(os.environ.get('SIM_REVIEW_PERIOD_S', 60)),
    'KV_REVIEW_PERIOD_S': float(
        os.environ.get('SIM_KV_REVIEW_PERIOD_S', 60)
    ),
    'METRICS_TICK_S': float(os.environ.get('SIM_METRICS_TICK_S', 10)),
    'MAX_BATCH': int(os.environ.get('SIM_MAX_BATCH', 32)),
    'MAX_SHARED_BATCH': int(os.environ.get('SIM_MAX_SHARED_BATCH', 128)),
    'MAX_QUEUE_DELAY_MS': float(
        os.environ.get('SIM_MAX_QUEUE_DELAY_MS', 4000)
    ),
    'DOWNGRADE_QUEUE_MS': float(
        os.environ.get('SIM_DOWNGRADE_QUEUE_MS', 8000)
    ),
    'MAX_SEQUENCE_LENGTH': int(os.environ.get('SIM_MAX_SEQUENCE_LENGTH', 1024)),
    'EQUIVALENCE_THRESHOLD': float(
        os.environ.get('SIM_EQUIVALENCE_THRESHOLD', 0.98)
    ),
    'SURROGATE_ACCEPTANCE': float(
        os.environ.get('SIM_SURROGATE_ACCEPTANCE', 192 / 231)
    ),
    'PARAM_SHARE_SURCHARGE': float(
        os.environ.get('SIM_PARAM_SHARE_SURCHARGE', 0.08)
    ),
}

LOG_LEVEL = os.environ.get('SIM_LOG_LEVEL', 'WARNING')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simples': {
            'format': '%(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simples',
        },
    },
    'loggers': {
        'app_engine': {'handlers': ['console'], 'level': LOG_LEVEL},
        'app_zoo': {'handlers': ['console'], 'level': LOG_LEVEL},
        'app_cluster': {'handlers': ['console'], 'level': LOG_LEVEL},
        'app_kv': {'handlers': ['console'], 'level': LOG_LEVEL},
        'app_agents': {'handlers': ['console'], 'level': LOG_LEVEL},
        'app_scheduler': {'handlers': ['console'], 'level': LOG_LEVEL},
        'app_workload': {'handlers': ['console'], 'level': LOG_LEVEL},
        'app_metrics': {'handlers': ['console'], 'level': LOG_LEVEL},
        'app_scenarios': {'handlers': ['console'], 'level': LOG_LEVEL},
    },
}

# Diretório com o cenário de referência (cluster, zoo, perfis, workload)
TESTBED_DIR = BASE_DIR / 'config' / 'testbed'
