from django.apps import AppConfig


class AppKvConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'app_kv'
