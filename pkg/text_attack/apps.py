from django.apps import AppConfig


class TextAttackConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'text_attack'
    verbose_name = 'Text Attack'
