from django.apps import AppConfig


class AppEngineConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'app_engine'
