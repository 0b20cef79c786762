"""
software_repository.py
Software release area and the on-site install manager.

Packages are self-contained binary bundles: a deterministic tar archive plus a
generated bootstrap script that sets up the application on a worker node.
Published packages are immutable. An InstallArea unpacks packages (and their
dependency closure) into a directory tree tracked by a text registry.
"""

import base64
import binascii
import io
import logging
import os
import shutil
import tarfile
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Protocol, Tuple, Union

from components.exceptions import (
    ChecksumMismatch,
    CyclicDependency,
    DependedUpon,
    DuplicateVersion,
    InsufficientDisk,
    IoFailure,
    MalformedDocument,
    MissingDependency,
    NotInstalled,
    UnknownPackage,
)
from components.file_lock import get_lock
from components.model import SoftwareRef, checksum32
from services.store import StoreHandle, Transaction

logger = logging.getLogger("software_repository")

REGISTRY_NAME = "registry.txt"
LOCK_NAME = ".lock"
STAGING_DIR = ".staging"
DEPS_NAME = ".deps"
BOOTSTRAP_NAME = "setup.sh"


def ref_key(application: str, version: str) -> str:
    return f"{application}/{version}"


@dataclass(frozen=True)
class Package:
    application: str
    app_version: str
    payload: bytes
    bootstrap: str
    dependencies: Tuple[SoftwareRef, ...] = ()
    checksum: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dependencies", tuple((str(a), str(v)) for a, v in self.dependencies))

    @property
    def ref(self) -> SoftwareRef:
        return (self.application, self.app_version)

    def verify(self) -> bool:
        return checksum32(self.payload) == self.checksum

    def to_struct(self) -> Dict[str, Any]:
        return {
            "application": self.application,
            "app_version": self.app_version,
            "payload": base64.b64encode(self.payload).decode("ascii"),
            "bootstrap": self.bootstrap,
            "dependencies": [[a, v] for a, v in self.dependencies],
            "checksum": f"{self.checksum:08x}",
        }

    @classmethod
    def from_struct(cls, struct: Dict[str, Any]) -> "Package":
        try:
            return cls(
                application=str(struct["application"]),
                app_version=str(struct["app_version"]),
                payload=base64.b64decode(struct["payload"], validate=True),
                bootstrap=str(struct.get("bootstrap", "")),
                dependencies=tuple(tuple(pair) for pair in struct.get("dependencies", [])),
                checksum=int(struct["checksum"], 16),
            )
        except (KeyError, TypeError, ValueError, binascii.Error) as exc:
            raise MalformedDocument(f"malformed package: {exc}")


def workload_script(application: str, version: str) -> str:
    """The synthetic application the simulated batch system 'runs'."""
    return (
        "#!/bin/sh\n"
        f"# synthetic workload for {application} {version}\n"
        f'echo "{application} {version}: processing $1 events"\n'
    )


def bootstrap_script(application: str, version: str, dependencies: Iterable[SoftwareRef]) -> str:
    lines = [
        "#!/bin/sh",
        f"# bootstrap for {application} {version}",
        'PKG_ROOT="$(cd "$(dirname "$0")" && pwd)"',
    ]
    for dep_app, dep_version in dependencies:
        lines.append(f'. "$PKG_ROOT/../../{dep_app}/{dep_version}/{BOOTSTRAP_NAME}"')
    lines += [
        f'export {application.upper().replace("-", "_")}_ROOT="$PKG_ROOT"',
        'export PATH="$PKG_ROOT/bin:$PATH"',
        "",
    ]
    return "\n".join(lines)


def build_package(
    application: str,
    version: str,
    files: Optional[Mapping[str, Union[str, bytes]]] = None,
    dependencies: Iterable[SoftwareRef] = (),
) -> Package:
    """
    Pack files into a reproducible archive and generate the bootstrap script.

    Entries are sorted and carry fixed ownership, mode and mtime, so the same
    inputs always give the same checksum. A ``bin/<application>`` entry point is
    generated when the files do not provide one.
    """
    contents = {name: (data.encode("utf-8") if isinstance(data, str) else data) for name, data in (files or {}).items()}
    contents.setdefault(f"bin/{application}", workload_script(application, version).encode("utf-8"))
    buffer = io.BytesIO()
    with tarfile.open(fileobj=buffer, mode="w", format=tarfile.USTAR_FORMAT) as tar:
        for name in sorted(contents):
            data = contents[name]
            info = tarfile.TarInfo(name)
            info.size = len(data)
            info.mtime = 0
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            info.mode = 0o755 if name.startswith("bin/") else 0o644
            tar.addfile(info, io.BytesIO(data))
    payload = buffer.getvalue()
    dependencies = tuple(dependencies)
    return Package(
        application=application,
        app_version=version,
        payload=payload,
        bootstrap=bootstrap_script(application, version, dependencies),
        dependencies=dependencies,
        checksum=checksum32(payload),
    )


class PackageSource(Protocol):
    def resolve_deps(self, application: str, version: str) -> List[SoftwareRef]: ...

    def fetch(self, application: str, version: str) -> Package: ...


class SoftwareRepository:
    """The central release area, backed by the production database."""

    def __init__(self, store: StoreHandle, clock: Callable[[], float] = time.time):
        self.store = store
        self.clock = clock

    def publish(self, package: Package) -> bool:
        """
        Make a package available. Publishing the identical package again is a no-op.

        Raises:
            ChecksumMismatch, CyclicDependency, MissingDependency, DuplicateVersion
        """
        if not package.verify():
            raise ChecksumMismatch(f"{ref_key(*package.ref)}: payload does not match its checksum")
        if package.ref in package.dependencies:
            raise CyclicDependency(f"{ref_key(*package.ref)} depends on itself")
        now = self.clock()

        def work(tx: Transaction) -> bool:
            key = ref_key(*package.ref)
            existing = tx.get("packages", key)
            if existing is not None:
                same = existing["checksum"] == package.checksum and existing["dependencies"] == [list(d) for d in package.dependencies]
                if not same:
                    raise DuplicateVersion(f"{key} is already published with different content")
                return False
            for dep in package.dependencies:
                if not tx.exists("packages", ref_key(*dep)):
                    raise MissingDependency(f"{key} depends on unpublished {ref_key(*dep)}")
            if package.ref in self._closure(tx, package.dependencies):
                raise CyclicDependency(f"publishing {key} would close a dependency cycle")
            tx.put(
                "packages",
                key,
                {
                    "application": package.application,
                    "app_version": package.app_version,
                    "dependencies": [list(d) for d in package.dependencies],
                    "checksum": package.checksum,
                    "size": len(package.payload),
                    "bootstrap": package.bootstrap,
                    "published_at": now,
                },
            )
            tx.put("package_payloads", key, base64.b64encode(package.payload).decode("ascii"))
            return True

        if self.store.transact(work):
            logger.info(f"Published {ref_key(*package.ref)} ({len(package.payload)} bytes)")
        return True

    @staticmethod
    def _closure(tx: Transaction, roots: Iterable[SoftwareRef]) -> List[SoftwareRef]:
        seen: List[SoftwareRef] = []
        stack = list(roots)
        while stack:
            ref = stack.pop()
            if ref in seen:
                continue
            seen.append(ref)
            rec = tx.get("packages", ref_key(*ref))
            if rec is not None:
                stack.extend(tuple(d) for d in rec["dependencies"])
        return seen

    def fetch(self, application: str, version: str) -> Package:
        def work(tx: Transaction) -> Package:
            key = ref_key(application, version)
            meta = tx.get("packages", key)
            if meta is None:
                raise UnknownPackage(f"{key} is not published")
            return Package(
                application=application,
                app_version=version,
                payload=base64.b64decode(tx.get("package_payloads", key)),
                bootstrap=meta["bootstrap"],
                dependencies=tuple(tuple(d) for d in meta["dependencies"]),
                checksum=meta["checksum"],
            )

        return self.store.transact(work)

    def query_available(self) -> List[Dict[str, Any]]:
        return self.store.transact(
            lambda tx: [
                {
                    "application": rec["application"],
                    "app_version": rec["app_version"],
                    "dependencies": rec["dependencies"],
                    "checksum": rec["checksum"],
                    "size": rec["size"],
                }
                for _, rec in tx.scan("packages")
            ]
        )

    def resolve_deps(self, application: str, version: str) -> List[SoftwareRef]:
        """
        Transitive dependency closure in install order: dependencies before
        dependents, siblings in lexicographic order, the package itself last.
        """

        def work(tx: Transaction) -> List[SoftwareRef]:
            if not tx.exists("packages", ref_key(application, version)):
                raise UnknownPackage(f"{ref_key(application, version)} is not published")
            order: List[SoftwareRef] = []
            done = set()
            # Iterative post-order walk; publish-time checks guarantee a DAG.
            stack: List[Tuple[SoftwareRef, bool]] = [((application, version), False)]
            while stack:
                ref, expanded = stack.pop()
                if ref in done:
                    continue
                if expanded:
                    done.add(ref)
                    order.append(ref)
                    continue
                stack.append((ref, True))
                rec = tx.get("packages", ref_key(*ref))
                if rec is None:
                    raise UnknownPackage(f"{ref_key(*ref)} is not published")
                for dep in sorted((tuple(d) for d in rec["dependencies"]), reverse=True):
                    if dep not in done:
                        stack.append((dep, False))
            return order

        return self.store.transact(work)


# --------------------------------------------------------------------------- #
# Install area
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class InstallRecord:
    application: str
    app_version: str
    path: str
    checksum: int
    installed_at: float

    def to_line(self) -> str:
        return f"{self.application}|{self.app_version}|{self.path}|{self.checksum:08x}|{self.installed_at!r}"

    @classmethod
    def from_line(cls, line: str) -> "InstallRecord":
        parts = line.rstrip("\n").split("|")
        if len(parts) != 5:
            raise IoFailure(f"bad registry line: {line!r}")
        return cls(parts[0], parts[1], parts[2], int(parts[3], 16), float(parts[4]))


@dataclass
class InstallReport:
    entries: List[Tuple[str, str, str]] = field(default_factory=list)

    def add(self, ref: SoftwareRef, outcome: str) -> None:
        self.entries.append((ref[0], ref[1], outcome))

    @property
    def installed(self) -> List[SoftwareRef]:
        return [(a, v) for a, v, outcome in self.entries if outcome == "installed"]

    @property
    def cached(self) -> List[SoftwareRef]:
        return [(a, v) for a, v, outcome in self.entries if outcome == "cached"]

    @property
    def all_cached(self) -> bool:
        return not self.installed


def tree_checksum(root: Path) -> int:
    """Checksum of every file under ``root`` (relative path and content), in path order."""
    value = 0
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix().encode("utf-8")
        value = zlib.crc32(rel + b"\0" + path.read_bytes(), value)
    return value & 0xFFFFFFFF


class InstallArea:
    """
    A directory of unpacked packages at ``root/<application>/<version>``.

    The area is single-writer: install and uninstall hold the area's lock file.
    """

    def __init__(self, root_path: Union[str, Path], quota_mb: Optional[int] = None, clock: Callable[[], float] = time.time):
        self.root_path = Path(root_path)
        self.quota_mb = quota_mb
        self.clock = clock
        self.root_path.mkdir(parents=True, exist_ok=True)

    @property
    def registry_path(self) -> Path:
        return self.root_path / REGISTRY_NAME

    def list_installed(self) -> Dict[SoftwareRef, InstallRecord]:
        if not self.registry_path.exists():
            return {}
        records = {}
        for line in self.registry_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = InstallRecord.from_line(line)
                records[(rec.application, rec.app_version)] = rec
        return records

    def is_installed(self, application: str, version: str) -> bool:
        return (application, version) in self.list_installed()

    def _write_registry(self, records: Dict[SoftwareRef, InstallRecord]) -> None:
        tmp = self.registry_path.with_suffix(".tmp")
        tmp.write_text("".join(records[ref].to_line() + "\n" for ref in sorted(records)), encoding="utf-8")
        os.replace(tmp, self.registry_path)

    def used_bytes(self) -> int:
        return sum(p.stat().st_size for p in self.root_path.rglob("*") if p.is_file())

    def _unpack(self, package: Package) -> InstallRecord:
        target = self.root_path / package.application / package.app_version
        staging = self.root_path / STAGING_DIR / f"{package.application}-{package.app_version}"
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir(parents=True)
        with tarfile.open(fileobj=io.BytesIO(package.payload), mode="r") as tar:
            for member in tar.getmembers():
                name = Path(member.name)
                if name.is_absolute() or ".." in name.parts or not (member.isfile() or member.isdir()):
                    raise ChecksumMismatch(f"{ref_key(*package.ref)}: unsafe archive entry {member.name}")
            if hasattr(tarfile, "data_filter"):
                tar.extractall(staging, filter="data")
            else:
                tar.extractall(staging)
        setup = staging / BOOTSTRAP_NAME
        setup.write_text(package.bootstrap, encoding="utf-8")
        setup.chmod(0o755)
        (staging / DEPS_NAME).write_text("".join(f"{a}|{v}\n" for a, v in package.dependencies), encoding="utf-8")
        if target.exists():
            shutil.rmtree(target)
        target.parent.mkdir(parents=True, exist_ok=True)
        os.replace(staging, target)
        return InstallRecord(package.application, package.app_version, str(target), tree_checksum(target), self.clock())

    def install(self, source: PackageSource, application: str, version: str) -> InstallReport:
        """
        Install a package and its dependency closure, skipping what is already installed.

        Every missing package is fetched and verified before anything is unpacked,
        so a corrupted or oversized download leaves the registry unchanged.
        """
        with get_lock(self.root_path / LOCK_NAME):
            installed = self.list_installed()
            plan = source.resolve_deps(application, version)
            missing: List[Package] = []
            for ref in plan:
                if ref in installed:
                    continue
                package = source.fetch(*ref)
                if not package.verify():
                    raise ChecksumMismatch(f"{ref_key(*ref)}: downloaded payload does not match its checksum")
                missing.append(package)
            if self.quota_mb is not None and missing:
                needed = sum(len(p.payload) for p in missing)
                if self.used_bytes() + needed > self.quota_mb * 1024 * 1024:
                    raise InsufficientDisk(
                        f"installing {ref_key(application, version)} needs {needed} bytes over the {self.quota_mb} MB quota"
                    )
            for package in missing:
                record = self._unpack(package)
                installed[package.ref] = record
                self._write_registry(installed)
                logger.info(f"Installed {ref_key(*package.ref)} into {record.path}")
            fresh = {package.ref for package in missing}
            report = InstallReport()
            for ref in plan:
                report.add(ref, "installed" if ref in fresh else "cached")
            return report

    def dependencies_of(self, record: InstallRecord) -> List[SoftwareRef]:
        deps_file = Path(record.path) / DEPS_NAME
        if not deps_file.exists():
            return []
        return [tuple(line.split("|", 1)) for line in deps_file.read_text(encoding="utf-8").splitlines() if line]

    def uninstall(self, application: str, version: str) -> bool:
        with get_lock(self.root_path / LOCK_NAME):
            installed = self.list_installed()
            ref = (application, version)
            if ref not in installed:
                raise NotInstalled(f"{ref_key(*ref)} is not installed in {self.root_path}")
            dependents = sorted(
                ref_key(*other) for other, rec in installed.items() if other != ref and ref in self.dependencies_of(rec)
            )
            if dependents:
                raise DependedUpon(dependents)
            record = installed.pop(ref)
            self._write_registry(installed)
            shutil.rmtree(record.path, ignore_errors=True)
            logger.info(f"Uninstalled {ref_key(*ref)}")
            return True

    def verify(self) -> List[SoftwareRef]:
        """Installed packages whose on-disk content no longer matches the registry."""
        bad = []
        for ref, record in self.list_installed().items():
            path = Path(record.path)
            if not path.is_dir() or tree_checksum(path) != record.checksum:
                bad.append(ref)
        return sorted(bad)

    def entry_point(self, application: str, version: str) -> Path:
        record = self.list_installed().get((application, version))
        if record is None:
            raise NotInstalled(f"{ref_key(application, version)} is not installed in {self.root_path}")
        path = Path(record.path) / "bin" / application
        if not path.is_file() or not os.access(path, os.X_OK):
            raise NotInstalled(f"{ref_key(application, version)} has no runnable entry point")
        return path
