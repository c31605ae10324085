from django.apps import AppConfig


class FedsimConfig(AppConfig):
    name = "fedsim"
    verbose_name = "Federated adversarial training simulator"
