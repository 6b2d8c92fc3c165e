class ConfigError(ValueError):
    """Invalid configuration or arguments (reported with exit code 2 by the CLI)."""
