"""Secure live-migration simulator for enclave applications."""

from __future__ import annotations

from .const import SERVICE_VERSION

__version__ = SERVICE_VERSION
