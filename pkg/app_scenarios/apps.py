from django.apps import AppConfig


class AppScenariosConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'app_scenarios'
