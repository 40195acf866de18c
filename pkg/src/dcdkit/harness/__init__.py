"""Configuration-driven experiment runner and reports."""
