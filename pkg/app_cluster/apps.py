from django.apps import AppConfig


class AppClusterConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'app_cluster'
