import os

import pytest


def pytest_collection_modifyitems(config, items):
    if os.getenv("DAQ8_RUN_SLOW", "0") == "1":
        return
    skip_slow = pytest.mark.skip(reason="acceptance-scale run; set DAQ8_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
