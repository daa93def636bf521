from django.apps import AppConfig


class GmmConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'gmm'
    verbose_name = 'Gaussian Mixture Core'
