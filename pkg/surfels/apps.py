from django.apps import AppConfig


class SurfelsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'surfels'
    verbose_name = 'Surfel geometry core'
