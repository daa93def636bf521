from django.apps import AppConfig


class DmfaConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'dmfa'
    verbose_name = 'Deep Mixture of Factor Analyzers'
