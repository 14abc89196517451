from django.apps import AppConfig


class SdfConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'sdf'
    verbose_name = 'Voxel SDF branch'
