"""Module entry point so `python -m parobs` matches the console script."""

from parobs.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
