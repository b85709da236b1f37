"""Crowd-sourced tram timing: GPS trace cleaning, stop-place detection,
delay distributions and arrival-time estimates."""

__version__ = "0.1.0"
