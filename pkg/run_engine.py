"""Lightweight launcher for the lqtrack engine.

Keep this small: argument handling and orchestration live in `src.lqtrack`.
"""
import sys

from src.lqtrack.main import main


if __name__ == "__main__":
    sys.exit(main())
