from django.apps import AppConfig


class CausalConfig(AppConfig):
    name = "causal"
