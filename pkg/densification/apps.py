from django.apps import AppConfig


class DensificationConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'densification'
    verbose_name = 'Surfel management'
