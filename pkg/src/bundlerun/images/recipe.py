"""Recipe derivation: manifest → deterministic image build plan."""

from __future__ import annotations

import os
from dataclasses import dataclass

import yaml

from bundlerun.bundle.manifest import BundleManifest
from bundlerun.errors import UnsupportedArchitecture
from bundlerun.images import DIGEST_LABEL, FALLBACK_WARNING_LABEL, ImageRecipe

_TABLE_PATH = os.path.join(os.path.dirname(__file__), "base_images.yaml")


@dataclass(frozen=True)
class BaseTable:
    mapping: dict[str, str]
    fallback_ref: str
    supported_architectures: frozenset[str]


def load_base_table(path: str | None = None) -> BaseTable:
    with open(path or _TABLE_PATH) as f:
        raw = yaml.safe_load(f)
    return BaseTable(
        mapping=dict(raw["mapping"]),
        fallback_ref=raw["fallback_ref"],
        supported_architectures=frozenset(raw["supported_architectures"]),
    )


_DEFAULT_TABLE: BaseTable | None = None


def _default_table() -> BaseTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = load_base_table()
    return _DEFAULT_TABLE


def derive_recipe(
    manifest: BundleManifest,
    *,
    content_digest: str | None = None,
    table: BaseTable | None = None,
) -> ImageRecipe:
    """Pure derivation: equal inputs give equal recipes.

    `content_digest` stamps the originating bundle into the label set when
    the caller has it (the build path always does).
    """
    table = table or _default_table()
    arch = manifest.os_info.architecture
    if arch not in table.supported_architectures:
        raise UnsupportedArchitecture(
            f"architecture {arch!r} is not in the supported set "
            f"{sorted(table.supported_architectures)}"
        )
    os_key = f"{manifest.os_info.distribution}/{manifest.os_info.distro_version}"
    labels: dict[str, str] = {}
    base_ref = table.mapping.get(os_key)
    if base_ref is None:
        base_ref = table.fallback_ref
        labels[FALLBACK_WARNING_LABEL] = os_key
    if content_digest is not None:
        labels[DIGEST_LABEL] = content_digest
    workdir = manifest.runs[0].working_dir if manifest.runs else "/"
    recipe = ImageRecipe(
        base_image_ref=base_ref,
        layer_plan=(("tree", "/"),),
        env=dict(manifest.environment),
        default_workdir=workdir,
        label_set=labels,
    )
    recipe.validate()
    return recipe
