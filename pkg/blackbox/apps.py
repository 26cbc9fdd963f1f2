from django.apps import AppConfig


class BlackboxConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'blackbox'
    verbose_name = 'Black-box Gateway'
