#!/usr/bin/env python3
"""
Launcher for the scene-sense command line, e.g.

    python run_pipeline.py featurize --config config/tau_open_set.ini
"""
import sys

from src.cli import main

if __name__ == "__main__":
    sys.exit(main())
