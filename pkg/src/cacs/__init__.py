"""Checkpointing-as-a-service over simulated IaaS clouds."""

from .client import HttpClient, InProcessClient, clone_via_api
from .gateway import ApiRequest, ApiResponse
from .lifecycle import AppEvent, AppState, transition, validate_asr
from .service import Service, ServiceConfig, load_config

__version__ = "0.1.0"

__all__ = [
    "ApiRequest", "ApiResponse", "AppEvent", "AppState", "HttpClient", "InProcessClient",
    "Service", "ServiceConfig", "clone_via_api", "load_config", "transition", "validate_asr",
]
