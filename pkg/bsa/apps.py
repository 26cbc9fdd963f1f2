from django.apps import AppConfig


class BsaConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'bsa'
    verbose_name = 'Block-wise Similarity Attack'
