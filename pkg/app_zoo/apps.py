from django.apps import AppConfig


class AppZooConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'app_zoo'
