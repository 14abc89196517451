from django.apps import AppConfig


class SplattingConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'splatting'
