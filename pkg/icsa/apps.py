from django.apps import AppConfig


class IcsaConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'icsa'
    verbose_name = 'Iterative Cross-Search Attack'
