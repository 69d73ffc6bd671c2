"""Slide persistence, job execution, and the REST orchestration layer."""
