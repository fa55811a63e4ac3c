from django.apps import AppConfig


class AppWorkloadConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'app_workload'
