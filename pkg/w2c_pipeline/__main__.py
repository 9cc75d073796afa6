"""Main entry point for the w2c_pipeline package."""

from .cli import cli

if __name__ == "__main__":
    cli()
