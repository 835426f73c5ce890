from django.apps import AppConfig


class NulldistConfig(AppConfig):
    name = "nulldist"
