from django.apps import AppConfig


class AppSchedulerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'app_scheduler'
