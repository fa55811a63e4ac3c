from django.apps import AppConfig


class AppAgentsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'app_agents'
