"""Entry point for running extraction_lab as a module."""

from extraction_lab.cli import main

if __name__ == "__main__":
    main()
