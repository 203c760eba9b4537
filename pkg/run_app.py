"""Standalone entrypoint for packaging the FedSIS lab CLI."""

from app.main import main

if __name__ == "__main__":
    main()
