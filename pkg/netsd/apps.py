from django.apps import AppConfig


class NetsdConfig(AppConfig):
    name = "netsd"
    verbose_name = "NetSD gateway"
