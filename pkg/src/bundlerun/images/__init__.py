"""Image recipes, building, and the content-addressed image cache."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class ImageRecipe:
    base_image_ref: str
    layer_plan: tuple[tuple[str, str], ...]  # (source, dest), dest absolute
    env: dict[str, str]
    default_workdir: str
    label_set: dict[str, str]

    def validate(self) -> None:
        assert self.base_image_ref, "empty base image ref"
        for _, dest in self.layer_plan:
            assert dest.startswith("/"), f"layer dest {dest!r} not absolute"


@dataclass(frozen=True)
class ImageRef:
    registry_ref: str
    image_digest: str
    built_at: float
    source_bundle_digest: str


DIGEST_LABEL = "run.bundle.content-digest"
FALLBACK_WARNING_LABEL = "run.bundle.base-fallback"

from bundlerun.images.recipe import derive_recipe, load_base_table  # noqa: E402
from bundlerun.images.builder import ImageStore  # noqa: E402

__all__ = [
    "ImageRecipe",
    "ImageRef",
    "ImageStore",
    "DIGEST_LABEL",
    "FALLBACK_WARNING_LABEL",
    "derive_recipe",
    "load_base_table",
]
