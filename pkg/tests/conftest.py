import os
import sys

from hypothesis import settings

# The pipeline modules live flat at the repository root.
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

settings.register_profile("pipeline", max_examples=25, deadline=None)
settings.load_profile("pipeline")
