import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

# Helper modules (oracles, fuzz, golden) live next to the tests.
sys.path.insert(0, str(Path(__file__).resolve().parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
