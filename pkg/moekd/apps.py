from django.apps import AppConfig


class MoekdConfig(AppConfig):
    name = "moekd"
    verbose_name = "Mixture-of-Experts knowledge distillation"

    def ready(self):
        import moekd.signals  # connects the stage receivers
