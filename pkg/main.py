"""
Main entry point for Viko Contact.
Runs the `viko` command line from a source checkout.
"""

import sys
from pathlib import Path

# Add the project root directory to Python path if needed
project_root = Path(__file__).parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from src.__main__ import main

if __name__ == '__main__':
    sys.exit(main())
