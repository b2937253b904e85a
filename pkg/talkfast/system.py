import os
import platform
import time
from importlib import metadata
from typing import Dict
from typing import NamedTuple
from typing import Optional

import cpuinfo
import torch


class SystemStatistics(NamedTuple):
    """Host the timing records were measured on.

    - Hardware
        - cpu_count: int
        - machine_type: str
        - processor_brand: str
        - processor_architecture: str
        - accelerator: str
    - OS
        - platform_string: str
        - c_timer: str
        - c_timer_resolution: float
    - Python
        - python_implementation: str
        - python_version: str
    - Packages
        - torch_version: str
        - cuda_version: Optional[str]
        - python_installed_packages: Dict[name, version]
    """

    # Hardware
    cpu_count: Optional[int]
    machine_type: str
    processor_brand: str
    processor_architecture: str
    accelerator: str
    # OS
    platform_string: str
    c_timer: str
    c_timer_resolution: float
    # Python
    python_implementation: str
    python_version: str
    # Packages
    torch_version: str
    cuda_version: Optional[str]
    python_installed_packages: Dict[str, str]


class System(object):
    """System statistics. Entries may be empty if the information is not available."""

    @staticmethod
    def hardware_cpu_count() -> Optional[int]:
        cpu_count = os.cpu_count()
        if cpu_count is not None and cpu_count < 1:
            return None
        return cpu_count

    @staticmethod
    def hardware_machine_type() -> str:
        return platform.machine()

    @staticmethod
    def hardware_processor_brand() -> str:
        info = cpuinfo.get_cpu_info()
        return info.get("brand_raw", info.get("brand", ""))

    @staticmethod
    def hardware_processor_architecture() -> str:
        return cpuinfo.get_cpu_info().get("arch", "")

    @staticmethod
    def hardware_accelerator(device: Optional[torch.device] = None) -> str:
        device = torch.device(device) if device is not None else None
        if device is not None and device.type == "cuda" and torch.cuda.is_available():
            return torch.cuda.get_device_name(device)
        return "cpu"

    @staticmethod
    def os_platform() -> str:
        return platform.platform()

    @staticmethod
    def os_c_timer() -> str:
        return time.get_clock_info("perf_counter").implementation

    @staticmethod
    def os_c_timer_resolution() -> float:
        return time.get_clock_info("perf_counter").resolution

    @staticmethod
    def python_implementation() -> str:
        return platform.python_implementation()

    @staticmethod
    def python_version() -> str:
        return platform.python_version()

    @staticmethod
    def torch_version() -> str:
        return torch.__version__

    @staticmethod
    def cuda_version() -> Optional[str]:
        return torch.version.cuda

    @staticmethod
    def python_installed_packages() -> Dict[str, str]:
        packages = {}
        for dist in metadata.distributions():
            name = dist.metadata["Name"]
            if name:
                packages[name] = dist.version
        return dict(sorted(packages.items()))

    @classmethod
    def statistics(
        cls, device: Optional[torch.device] = None, packages: bool = True
    ) -> SystemStatistics:
        return SystemStatistics(
            cpu_count=cls.hardware_cpu_count(),
            machine_type=cls.hardware_machine_type(),
            processor_brand=cls.hardware_processor_brand(),
            processor_architecture=cls.hardware_processor_architecture(),
            accelerator=cls.hardware_accelerator(device),
            platform_string=cls.os_platform(),
            c_timer=cls.os_c_timer(),
            c_timer_resolution=cls.os_c_timer_resolution(),
            python_implementation=cls.python_implementation(),
            python_version=cls.python_version(),
            torch_version=cls.torch_version(),
            cuda_version=cls.cuda_version(),
            python_installed_packages=cls.python_installed_packages() if packages else {},
        )


def collect_system_statistics(
    device: Optional[torch.device] = None, packages: bool = False
) -> SystemStatistics:
    """Collects hardware, OS, Python and torch statistics for timing records.

    Args:
        device (Optional[torch.device], optional): Device whose accelerator name is reported.
        packages (bool, optional): Also list every installed distribution. Defaults to False.
    """
    return System.statistics(device, packages)
