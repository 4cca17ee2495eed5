"""
Patch Library - versioned reference geometry of the keypoint patch designs
"""
import os

# Get the directory where this file is located
LIBRARY_DIR = os.path.dirname(os.path.abspath(__file__))

# Version of the design geometry shipped with this release
DESIGNS_VERSION = 1


def get_library_path(filename=None):
    """Get the full path to a library file (default: the current designs document)"""
    if filename is None:
        filename = f"designs_v{DESIGNS_VERSION}.json"
    return os.path.join(LIBRARY_DIR, filename)
