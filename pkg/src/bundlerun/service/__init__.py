from bundlerun.service.app import create_app
from bundlerun.service.config import ServiceConfig, load_config
from bundlerun.service.ratelimit import RateLimiter
from bundlerun.service.wiring import Services

__all__ = [
    "RateLimiter",
    "ServiceConfig",
    "Services",
    "create_app",
    "load_config",
]
