from django.apps import AppConfig


class CitestConfig(AppConfig):
    name = "citest"
