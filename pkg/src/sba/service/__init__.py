from .main_app import create_main_app
from .remote_app import create_remote_app

__all__ = ["create_main_app", "create_remote_app"]
