def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: statistically heavy or training-scale test"
    )
    config.addinivalue_line(
        "markers", "acceptance: end-to-end acceptance criterion"
    )
