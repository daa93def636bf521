from django.apps import AppConfig


class ViConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'vi'
    verbose_name = 'Variational Inference'
