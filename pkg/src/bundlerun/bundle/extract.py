"""Link-safe data-tree extraction.

Used by the image builder to materialize a bundle's data tree over a base
root filesystem. Bundle files win on path collision. Every write is
guarded so no entry — including ones reached through symlinks created by
earlier entries — can land outside the destination root.
"""

from __future__ import annotations

import gzip
import os
import shutil
import tarfile
import zlib

from bundlerun.bundle.tree import check_member
from bundlerun.errors import MalformedDataTree, PathTraversal

_COPY_CHUNK = 1024 * 1024


def _assert_inside(root_real: str, path: str, name: str) -> None:
    real = os.path.realpath(path)
    if real != root_real and not real.startswith(root_real + os.sep):
        raise PathTraversal(f"tree member {name!r} resolves outside the extraction root")


def _prepare_dest(root: str, root_real: str, rel: str, name: str) -> str:
    dest = os.path.join(root, rel)
    parent = os.path.dirname(dest)
    _assert_inside(root_real, parent, name)
    # The final component must not be resolved through an existing symlink.
    if os.path.islink(dest):
        return dest
    _assert_inside(root_real, dest, name)
    return dest


def extract_tree(tree_path: str, dest_root: str) -> int:
    """Extract a data-tree archive into dest_root; returns the entry count.

    Raises PathTraversal or MalformedDataTree without writing outside
    dest_root for any adversarial input.
    """
    os.makedirs(dest_root, exist_ok=True)
    root_real = os.path.realpath(dest_root)
    count = 0
    try:
        # GzipFile raises on truncation and checks the CRC trailer; tarfile's
        # own gz stream would silently stop at a cut, yielding a partial tree
        with open(tree_path, "rb") as f, gzip.GzipFile(
            fileobj=f, mode="rb"
        ) as gz, tarfile.open(fileobj=gz, mode="r|") as tar:
            for member in tar:
                rel = check_member(member)
                if rel == "":
                    continue
                dest = _prepare_dest(dest_root, root_real, rel, member.name)
                if member.isdir():
                    if os.path.islink(dest) or os.path.isfile(dest):
                        os.unlink(dest)
                    os.makedirs(dest, exist_ok=True)
                    os.chmod(dest, member.mode or 0o755)
                elif member.issym():
                    if os.path.islink(dest) or os.path.isfile(dest):
                        os.unlink(dest)
                    elif os.path.isdir(dest):
                        shutil.rmtree(dest)
                    os.symlink(member.linkname, dest)
                elif member.islnk():
                    target = os.path.join(dest_root, check_member_link(member))
                    _assert_inside(root_real, target, member.name)
                    if not os.path.exists(target):
                        raise MalformedDataTree(
                            f"hardlink {member.name!r} targets missing {member.linkname!r}"
                        )
                    if os.path.lexists(dest):
                        os.unlink(dest)
                    os.link(target, dest)
                elif member.isfile():
                    if os.path.isdir(dest) and not os.path.islink(dest):
                        raise MalformedDataTree(
                            f"file member {member.name!r} collides with a directory"
                        )
                    if os.path.lexists(dest):
                        os.unlink(dest)
                    src = tar.extractfile(member)
                    assert src is not None
                    fd = os.open(dest, os.O_WRONLY | os.O_CREAT | os.O_EXCL | os.O_NOFOLLOW,
                                 member.mode or 0o644)
                    with os.fdopen(fd, "wb") as out:
                        while True:
                            chunk = src.read(_COPY_CHUNK)
                            if not chunk:
                                break
                            out.write(chunk)
                count += 1
            while gz.read(65536):  # drain so the trailer check actually runs
                pass
    except (tarfile.TarError, EOFError, gzip.BadGzipFile, zlib.error) as exc:
        raise MalformedDataTree(f"data tree archive is corrupt or truncated: {exc}") from exc
    return count


def check_member_link(member: tarfile.TarInfo) -> str:
    from bundlerun.bundle.tree import member_rel_path

    return member_rel_path(member.linkname)
