"""Llamba desk-scale runtime."""
