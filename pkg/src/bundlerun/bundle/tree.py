"""Data-tree entry rules shared by the writer, parser, and extractor.

Tree archive members are stored with the leading '/' stripped; a member
named ``app/run.sh`` materializes at ``/app/run.sh`` inside the rebuilt
environment. Every rule here exists to keep adversarial archives from
writing outside an extraction root.
"""

from __future__ import annotations

import posixpath
import tarfile
from dataclasses import dataclass, field

from bundlerun.errors import MalformedDataTree, PathTraversal

ALLOWED_TYPES = (
    tarfile.REGTYPE,
    tarfile.AREGTYPE,
    tarfile.DIRTYPE,
    tarfile.SYMTYPE,
    tarfile.LNKTYPE,
)


def member_rel_path(name: str) -> str:
    """Normalize a tree member name to a safe root-relative path."""
    if name.startswith("/"):
        raise PathTraversal(f"tree member {name!r} has an absolute name")
    norm = posixpath.normpath(name)
    if norm in (".", ""):
        return ""
    if norm.startswith("..") or "/../" in f"/{norm}/":
        raise PathTraversal(f"tree member {name!r} escapes the tree root")
    if norm != name.rstrip("/"):
        raise MalformedDataTree(f"tree member {name!r} is not in normalized form")
    return norm


def link_escapes(member_path: str, target: str) -> bool:
    """True when a symlink target resolves outside the tree root.

    Absolute targets are re-rooted at the tree root, so only '..'
    segments can escape. Relative targets resolve against the link's
    directory.
    """
    if target.startswith("/"):
        resolved = posixpath.normpath(target.lstrip("/"))
    else:
        resolved = posixpath.normpath(posixpath.join(posixpath.dirname(member_path), target))
    return resolved.startswith("..") or resolved == ".."


def check_member(member: tarfile.TarInfo) -> str:
    """Validate one tree member header; returns its normalized rel path."""
    rel = member_rel_path(member.name)
    if member.type not in ALLOWED_TYPES:
        raise MalformedDataTree(
            f"tree member {member.name!r} has unsupported type {member.type!r} "
            "(devices and fifos must be declared volatile, not packed)"
        )
    if member.type == tarfile.SYMTYPE and link_escapes(rel, member.linkname):
        raise PathTraversal(
            f"symlink {member.name!r} -> {member.linkname!r} resolves outside the tree"
        )
    if member.type == tarfile.LNKTYPE:
        # Hardlink targets are tree member names, same rules as entries.
        link_rel = member_rel_path(member.linkname)
        if link_rel == "":
            raise MalformedDataTree(f"hardlink {member.name!r} targets the tree root")
    return rel


@dataclass
class TreeIndex:
    """Name index over a scanned data tree; paths are absolute ('/app/run.sh')."""

    files: set[str] = field(default_factory=set)
    dirs: set[str] = field(default_factory=set)
    symlinks: dict[str, str] = field(default_factory=dict)
    entry_count: int = 0

    def add(self, member: tarfile.TarInfo, rel: str) -> None:
        if rel == "":
            return
        abspath = "/" + rel
        self.entry_count += 1
        if member.type == tarfile.DIRTYPE:
            self.dirs.add(abspath)
        elif member.type == tarfile.SYMTYPE:
            self.symlinks[abspath] = member.linkname
        else:
            self.files.add(abspath)
        # Implicit parent directories.
        parent = posixpath.dirname(abspath)
        while parent != "/":
            self.dirs.add(parent)
            parent = posixpath.dirname(parent)

    def has_path(self, path: str) -> bool:
        return path == "/" or path in self.files or path in self.dirs or path in self.symlinks

    def has_dir(self, path: str) -> bool:
        return path == "/" or path in self.dirs

    def has_parent_dir(self, path: str) -> bool:
        parent = posixpath.dirname(path)
        # A symlinked parent also lets a run create the file through it.
        return self.has_dir(parent) or parent in self.symlinks
