from dataclasses import replace
from pathlib import Path
from typing import List

import pytest

from components.exceptions import (
    ChecksumMismatch,
    CyclicDependency,
    DependedUpon,
    DuplicateVersion,
    InsufficientDisk,
    MissingDependency,
    NotInstalled,
    UnknownPackage,
)
from components.model import SoftwareRef
from services.software_repository import (
    InstallArea,
    Package,
    SoftwareRepository,
    build_package,
)
from services.store import StoreHandle


@pytest.fixture
def repo() -> SoftwareRepository:
    return SoftwareRepository(StoreHandle.open(None), clock=lambda: 1000.0)


def _diamond(repo: SoftwareRepository) -> None:
    repo.publish(build_package("D", "1.0"))
    repo.publish(build_package("B", "1.0", dependencies=[("D", "1.0")]))
    repo.publish(build_package("C", "1.0", dependencies=[("D", "1.0")]))
    repo.publish(build_package("A", "1.0", dependencies=[("B", "1.0"), ("C", "1.0")]))


class CorruptingSource:
    """Hands out packages from a repository, flipping one payload byte of ``victim``."""

    def __init__(self, repo: SoftwareRepository, victim: str):
        self.repo = repo
        self.victim = victim
        self.fetched: List[SoftwareRef] = []

    def resolve_deps(self, application: str, version: str) -> List[SoftwareRef]:
        return self.repo.resolve_deps(application, version)

    def fetch(self, application: str, version: str) -> Package:
        self.fetched.append((application, version))
        package = self.repo.fetch(application, version)
        if application != self.victim:
            return package
        payload = bytearray(package.payload)
        payload[len(payload) // 2] ^= 0x01
        return replace(package, payload=bytes(payload))


def test_build_package_is_reproducible() -> None:
    first = build_package("Gauss", "v1", {"data/table.txt": "1 2 3"})
    second = build_package("Gauss", "v1", {"data/table.txt": "1 2 3"})
    assert first.payload == second.payload
    assert first.checksum == second.checksum and first.verify()
    assert Package.from_struct(first.to_struct()) == first


def test_publish_examples(repo: SoftwareRepository) -> None:
    assert repo.publish(build_package("A", "1.0"))
    assert repo.publish(build_package("A", "1.0"))
    with pytest.raises(MissingDependency):
        repo.publish(build_package("B", "1.0", dependencies=[("C", "1.0")]))
    with pytest.raises(DuplicateVersion):
        repo.publish(build_package("A", "1.0", {"extra": "changed"}))
    with pytest.raises(CyclicDependency):
        repo.publish(build_package("E", "1.0", dependencies=[("E", "1.0")]))
    broken = replace(build_package("F", "1.0"), checksum=1)
    with pytest.raises(ChecksumMismatch):
        repo.publish(broken)
    assert [(p["application"], p["app_version"]) for p in repo.query_available()] == [("A", "1.0")]


def test_fetch_unknown(repo: SoftwareRepository) -> None:
    with pytest.raises(UnknownPackage):
        repo.fetch("Gauss", "v9")
    with pytest.raises(UnknownPackage):
        repo.resolve_deps("Gauss", "v9")


def test_resolve_deps(repo: SoftwareRepository) -> None:
    _diamond(repo)
    assert repo.resolve_deps("D", "1.0") == [("D", "1.0")]
    assert repo.resolve_deps("A", "1.0") == [("D", "1.0"), ("B", "1.0"), ("C", "1.0"), ("A", "1.0")]


def test_install_is_cached_second_time(repo: SoftwareRepository, tmp_path: Path) -> None:
    repo.publish(build_package("A", "1.0"))
    area = InstallArea(tmp_path / "sw", clock=lambda: 5.0)
    first = area.install(repo, "A", "1.0")
    assert first.installed == [("A", "1.0")]
    second = area.install(repo, "A", "1.0")
    assert second.all_cached and second.cached == [("A", "1.0")]
    assert area.entry_point("A", "1.0").name == "A"
    assert area.verify() == []


def test_install_orders_dependencies_first(repo: SoftwareRepository, tmp_path: Path) -> None:
    repo.publish(build_package("A", "1.0"))
    repo.publish(build_package("B", "1.0", dependencies=[("A", "1.0")]))
    area = InstallArea(tmp_path / "sw")
    report = area.install(repo, "B", "1.0")
    assert report.entries == [("A", "1.0", "installed"), ("B", "1.0", "installed")]
    assert set(area.list_installed()) == {("A", "1.0"), ("B", "1.0")}
    registry = area.registry_path.read_text().splitlines()
    assert [line.split("|")[:2] for line in registry] == [["A", "1.0"], ["B", "1.0"]]
    assert (Path(area.list_installed()[("B", "1.0")].path) / "setup.sh").read_text().count("A/1.0/setup.sh") == 1


def test_corrupted_download_leaves_registry_unchanged(repo: SoftwareRepository, tmp_path: Path) -> None:
    _diamond(repo)
    area = InstallArea(tmp_path / "sw")
    source = CorruptingSource(repo, victim="C")
    with pytest.raises(ChecksumMismatch):
        area.install(source, "A", "1.0")
    assert area.list_installed() == {}
    assert not (tmp_path / "sw" / "D").exists()
    report = area.install(repo, "A", "1.0")
    assert len(report.installed) == 4


def test_quota_is_enforced(repo: SoftwareRepository, tmp_path: Path) -> None:
    repo.publish(build_package("A", "1.0", {"big.bin": b"\0" * 4096}))
    area = InstallArea(tmp_path / "sw", quota_mb=0)
    with pytest.raises(InsufficientDisk):
        area.install(repo, "A", "1.0")
    assert area.list_installed() == {}


def test_uninstall(repo: SoftwareRepository, tmp_path: Path) -> None:
    repo.publish(build_package("A", "1.0"))
    repo.publish(build_package("B", "1.0", dependencies=[("A", "1.0")]))
    area = InstallArea(tmp_path / "sw")
    area.install(repo, "B", "1.0")
    with pytest.raises(DependedUpon) as info:
        area.uninstall("A", "1.0")
    assert info.value.dependents == ["B/1.0"]
    assert area.uninstall("B", "1.0")
    assert area.uninstall("A", "1.0")
    assert area.list_installed() == {}
    with pytest.raises(NotInstalled):
        area.uninstall("A", "1.0")


def test_verify_detects_tampering(repo: SoftwareRepository, tmp_path: Path) -> None:
    repo.publish(build_package("A", "1.0"))
    area = InstallArea(tmp_path / "sw")
    area.install(repo, "A", "1.0")
    (Path(area.list_installed()[("A", "1.0")].path) / "bin" / "A").write_text("tampered")
    assert area.verify() == [("A", "1.0")]
