from django.apps import AppConfig


class DynamicsConfig(AppConfig):
    name = 'dynamics'
    verbose_name = 'RBM quantum dynamics'
    default_auto_field = 'django.db.models.BigAutoField'
