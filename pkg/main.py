#!/usr/bin/env python3
"""Entry point for the windfuse command-line tool."""

from windfuse.cli import main

if __name__ == "__main__":
    main()
