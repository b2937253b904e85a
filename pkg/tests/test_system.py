from talkfast import system


def test_collect_system_statistics():
    statistics = system.collect_system_statistics()
    assert len(statistics) == 13
    assert isinstance(statistics, system.SystemStatistics)
    # Hardware
    assert statistics.cpu_count is None or isinstance(statistics.cpu_count, int)
    assert isinstance(statistics.machine_type, str)
    assert isinstance(statistics.processor_brand, str)
    assert isinstance(statistics.processor_architecture, str)
    assert statistics.accelerator == "cpu"
    # OS
    assert isinstance(statistics.platform_string, str)
    assert statistics.c_timer_resolution > 0
    # Python
    assert statistics.python_implementation
    assert statistics.python_version
    # Packages
    assert statistics.torch_version
    assert statistics.python_installed_packages == {}


def test_installed_packages():
    statistics = system.collect_system_statistics("cpu", packages=True)
    assert isinstance(statistics.python_installed_packages, dict)
    assert "torch" in {name.lower() for name in statistics.python_installed_packages}
