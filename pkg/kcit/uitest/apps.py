from django.apps import AppConfig


class UitestConfig(AppConfig):
    name = "uitest"
