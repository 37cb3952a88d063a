import importlib
import os


def load_config(config_type=None):
    """Resolve the active configuration class.

    The dotted path comes from the argument, then the ``SGLV_CONFIG_TYPE``
    environment variable, then ``sglv.config.Config``.
    """
    config_type = config_type or os.getenv(
        "SGLV_CONFIG_TYPE", default="sglv.config.Config"
    )
    module_name, _, attr = config_type.rpartition(".")
    return getattr(importlib.import_module(module_name), attr)
