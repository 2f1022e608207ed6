"""Pipeline configuration, class vocabulary, run manifest and seed derivation.

Everything downstream reads its constants from :class:`PipelineConfig` and its
randomness from :func:`derive_rng`, so two runs with the same config file,
vocabulary and master seed produce the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from synthcomp import __version__

DEFAULT_FG_TEMPLATES = (
    "A photo of <object>",
    "A realistic photo of <object>",
    "A photo of <object> in pure background",
    "<object> in a white background",
    "<object> without background",
    "<object> isolated on white background",
)

# Sentence templates for context words extracted from CDI captions. Only the
# first one comes from a worked example; the rest are placeholders.
DEFAULT_CONTEXT_TEMPLATES = (
    "a real image of <context>",
    "a realistic scene of <context>",
    "a wide shot of <context>",
    "<context>, high quality photograph",
)

# Zero-shot prompts. Placeholder scenes, replace per deployment.
DEFAULT_ZERO_SHOT_PROMPTS = (
    "a real image of a forest",
    "a real image of a grass field",
    "an empty street in a city",
    "a living room interior",
    "a kitchen interior",
    "a beach with the ocean",
    "a snowy mountain landscape",
    "a farm with a barn",
    "an empty parking lot",
    "a park with trees",
    "a lake under a blue sky",
    "an empty office",
    "a desert road",
    "a river in a valley",
    "an empty dining room",
    "a countryside road",
)

FILTER_MODES = ("reject_then_rank", "weighted")


class ConfigError(ValueError):
    """Raised for malformed config or vocabulary files and invariant violations."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class PipelineConfig:
    num_cdis_per_class: int = 1
    captions_per_cdi: int = 2
    images_per_caption: int = 80
    keep_per_caption: int = 30
    zero_shot_templates: int = 16
    images_per_zero_shot_template: int = 600
    zero_shot_prune_fraction: float = 0.05
    fg_templates: tuple[str, ...] = DEFAULT_FG_TEMPLATES
    fg_images_per_template: int = 500
    fg_keep_per_template: int = 250
    pastes_per_image: int = 4
    target_dataset_size: int = 60000
    blur_sigma: float = 2.0
    rotation_range: tuple[float, float] = (-30.0, 30.0)
    scale_range: tuple[float, float] = (0.5, 1.5)
    min_visible_fraction: float = 0.25
    occlusion_drop_fraction: float = 0.25
    image_size: tuple[int, int] = (512, 512)
    master_seed: int = 0
    # Knobs not pinned by the method itself.
    context_templates: tuple[str, ...] = DEFAULT_CONTEXT_TEMPLATES
    zero_shot_prompts: tuple[str, ...] = DEFAULT_ZERO_SHOT_PROMPTS
    reject_threshold: float = 0.26
    filter_mode: str = "reject_then_rank"
    filter_class_weight: float = 1.0
    class_prompt_template: str = "a photo of <object>"
    fg_color_threshold: float = 40.0
    fg_min_component_fraction: float = 0.005
    fg_area_min: float = 0.02
    fg_area_max: float = 0.90

    def __post_init__(self):
        self.validate()

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def validate(self) -> None:
        for name in (
            "num_cdis_per_class",
            "zero_shot_templates",
            "pastes_per_image",
        ):
            if getattr(self, name) < 0:
                raise ConfigError("must be nonnegative", key=name)
        for name in (
            "captions_per_cdi",
            "images_per_caption",
            "keep_per_caption",
            "images_per_zero_shot_template",
            "fg_images_per_template",
            "fg_keep_per_template",
            "target_dataset_size",
        ):
            if getattr(self, name) < 1:
                raise ConfigError("must be a positive integer", key=name)
        if self.keep_per_caption > self.images_per_caption:
            raise ConfigError(
                f"keep_per_caption={self.keep_per_caption} exceeds "
                f"images_per_caption={self.images_per_caption}",
                key="keep_per_caption",
            )
        if self.fg_keep_per_template > self.fg_images_per_template:
            raise ConfigError(
                "fg_keep_per_template exceeds fg_images_per_template",
                key="fg_keep_per_template",
            )
        if not 0.0 <= self.zero_shot_prune_fraction < 1.0:
            raise ConfigError("must lie in [0, 1)", key="zero_shot_prune_fraction")
        if self.zero_shot_templates > len(self.zero_shot_prompts):
            raise ConfigError(
                f"{self.zero_shot_templates} templates requested but only "
                f"{len(self.zero_shot_prompts)} zero_shot_prompts given",
                key="zero_shot_templates",
            )
        if self.blur_sigma < 0:
            raise ConfigError("must be nonnegative", key="blur_sigma")
        lo, hi = self.rotation_range
        if lo > hi:
            raise ConfigError("empty interval", key="rotation_range")
        lo, hi = self.scale_range
        if lo <= 0 or lo > hi:
            raise ConfigError("scale_range needs 0 < min <= max", key="scale_range")
        for name in ("min_visible_fraction", "occlusion_drop_fraction"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError("must lie in (0, 1]", key=name)
        if min(self.image_size) < 1:
            raise ConfigError("image dimensions must be >= 1", key="image_size")
        if self.filter_mode not in FILTER_MODES:
            raise ConfigError(f"expected one of {FILTER_MODES}", key="filter_mode")
        if not 0.0 <= self.fg_area_min <= self.fg_area_max <= 1.0:
            raise ConfigError("need 0 <= fg_area_min <= fg_area_max <= 1", key="fg_area_min")
        if not self.fg_templates:
            raise ConfigError("at least one template required", key="fg_templates")

    def with_overrides(self, **changes) -> PipelineConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# --------------------------------------------------------------------------
# key = value file format


def _parse_int(text: str) -> int:
    return int(text.replace("_", ""))


def _parse_float(text: str) -> float:
    return float(text)


def _parse_list(text: str) -> tuple[str, ...]:
    items = tuple(item.strip() for item in text.split("|"))
    if any(not item for item in items):
        raise ValueError("empty list item")
    return items


def _parse_range(text: str, symmetric: bool) -> tuple[float, float]:
    parts = [p.strip() for p in text.replace("±", "").split(",")]
    if len(parts) == 1 and symmetric:
        half = abs(float(parts[0]))
        return (-half, half)
    if len(parts) != 2:
        raise ValueError("expected 'lo, hi'")
    return (float(parts[0]), float(parts[1]))


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().replace("×", "x").split("x")
    if len(parts) != 2:
        raise ValueError("expected WIDTHxHEIGHT")
    return (int(parts[0]), int(parts[1]))


_PARSERS = {
    "fg_templates": _parse_list,
    "context_templates": _parse_list,
    "zero_shot_prompts": _parse_list,
    "rotation_range": lambda t: _parse_range(t, symmetric=True),
    "scale_range": lambda t: _parse_range(t, symmetric=False),
    "image_size": _parse_size,
    "filter_mode": str.strip,
    "class_prompt_template": str.strip,
}


def _parser_for(f) -> callable:
    if f.name in _PARSERS:
        return _PARSERS[f.name]
    if f.type in ("int", int):
        return _parse_int
    return _parse_float


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def parse_config(text: str) -> PipelineConfig:
    values = {}
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELDS:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in values:
            raise ConfigError("duplicate key", key=key, line=lineno)
        try:
            values[key] = _parser_for(_FIELDS[key])(value)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {value!r}: {exc}", key=key, line=lineno) from None
        lines[key] = lineno
    try:
        return PipelineConfig(**values)
    except ConfigError as exc:
        if exc.key is not None and exc.key in lines:
            raise ConfigError(str(exc).rsplit(" (", 1)[0], key=exc.key, line=lines[exc.key]) from None
        raise


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def dump_config(config: PipelineConfig) -> str:
    """Serialize to the key = value format accepted by :func:`parse_config`."""
    out = []
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name == "image_size":
            text = f"{value[0]}x{value[1]}"
        elif f.name in ("rotation_range", "scale_range"):
            text = f"{value[0]!r}, {value[1]!r}"
        elif isinstance(value, tuple):
            text = " | ".join(value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        out.append(f"{f.name} = {text}")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class Category:
    id: int
    label: str
    synonyms: tuple[str, ...] = ()


@dataclass(frozen=True)
class ClassVocabulary:
    categories: tuple[Category, ...]

    def __post_init__(self):
        labels = [c.label for c in self.categories]
        if any(not label.strip() for label in labels):
            raise ConfigError("empty class label")
        if len(set(labels)) != len(labels):
            raise ConfigError("class labels must be unique")
        ids = [c.id for c in self.categories]
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigError("category ids must be contiguous from 1")

    @classmethod
    def from_labels(cls, labels, synonyms: dict | None = None) -> ClassVocabulary:
        synonyms = synonyms or {}
        return cls(
            tuple(
                Category(i, label, tuple(synonyms.get(label, ())))
                for i, label in enumerate(labels, start=1)
            )
        )

    def __len__(self) -> int:
        return len(self.categories)

    def __iter__(self):
        return iter(self.categories)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.categories]

    def by_id(self, category_id: int) -> Category:
        return self.categories[category_id - 1]

    def by_label(self, label: str) -> Category:
        for c in self.categories:
            if c.label == label:
                return c
        raise KeyError(label)


def parse_vocabulary(text: str) -> ClassVocabulary:
    """One class per line: ``label`` or ``label<TAB>syn1,syn2``. Ids follow line order."""
    labels, synonyms = [], {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        label, _, rest = line.partition("\t")
        label = label.strip()
        if not label:
            raise ConfigError("empty class label", line=lineno)
        if label in synonyms:
            raise ConfigError("duplicate class label", key=label, line=lineno)
        labels.append(label)
        synonyms[label] = tuple(s.strip() for s in rest.split(",") if s.strip())
    return ClassVocabulary.from_labels(labels, synonyms)


def load_vocabulary(path) -> ClassVocabulary:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"vocabulary file not found: {path}")
    return parse_vocabulary(path.read_text(encoding="utf-8"))


def voc_vocabulary() -> ClassVocabulary:
    """The 20 Pascal VOC classes with the bundled synonym snapshot."""
    from synthcomp.prompts import load_class_synonyms

    labels = (Path(__file__).parent / "data" / "voc_classes.txt").read_text().split()
    return ClassVocabulary.from_labels(labels, load_class_synonyms())


# --------------------------------------------------------------------------
# manifest and seeds


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_digest(config: PipelineConfig, vocab: ClassVocabulary) -> str:
    payload = {
        "config": config.to_dict(),
        "vocabulary": [[c.id, c.label, list(c.synonyms)] for c in vocab],
    }
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()


@dataclass
class StageRecord:
    name: str
    counts: dict = field(default_factory=dict)
    digest: str = ""
    status: str = "ok"


@dataclass
class RunManifest:
    config_digest: str
    master_seed: int
    stages: list[StageRecord] = field(default_factory=list)
    tool_version: str = __version__
    image_digests: list[str] = field(default_factory=list)

    @classmethod
    def create(cls, config: PipelineConfig, vocab: ClassVocabulary) -> RunManifest:
        return cls(config_digest(config, vocab), config.master_seed)

    def record_stage(self, name: str, counts: dict | None = None, digest: str = "", status: str = "ok"):
        self.stages = [s for s in self.stages if s.name != name]
        record = StageRecord(name, dict(counts or {}), digest, status)
        self.stages.append(record)
        return record

    def stage(self, name: str) -> StageRecord | None:
        for s in self.stages:
            if s.name == name:
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "master_seed": self.master_seed,
            "stages": [asdict(s) for s in self.stages],
            "tool_version": self.tool_version,
            "image_digests": list(self.image_digests),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> RunManifest:
        data = json.loads(Path(path).read_text())
        return cls(
            data["config_digest"],
            data["master_seed"],
            [StageRecord(**s) for s in data.get("stages", [])],
            data.get("tool_version", __version__),
            list(data.get("image_digests", [])),
        )


_MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, stage: str, index: int = 0) -> int:
    """Keyed 64-bit hash of ``(stage, index)`` under ``master_seed``."""
    key = (master_seed & _MASK64).to_bytes(8, "little")
    h = hashlib.blake2b(f"{stage}\x1f{index}".encode(), digest_size=8, key=key)
    return int.from_bytes(h.digest(), "little")


def derive_rng(manifest, stage: str, index: int = 0) -> np.random.Generator:
    """Independent counter-based stream for one ``(stage, index)`` item.

    ``manifest`` may be a :class:`RunManifest`, a :class:`PipelineConfig` or a
    bare integer seed.
    """
    seed = manifest if isinstance(manifest, int) else manifest.master_seed
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, stage, index)))


# --------------------------------------------------------------------------
# count planning


def prune_count(n: int, fraction: float) -> int:
    """Number of items dropped when pruning ``fraction`` of ``n``: ceil, computed exactly."""
    return math.ceil(Fraction(repr(float(fraction))) * n)


@dataclass(frozen=True)
class CountPlan:
    num_classes: int
    cdis: int
    captions: int
    contexts_generated: int
    contexts_kept: int
    zero_shot_generated: int
    zero_shot_backgrounds: int
    fg_generated: int
    fg_kept: int
    paste_attempts: int

    def per_caption_set(self) -> tuple[int, int]:
        return (self.contexts_generated // max(self.cdis, 1), self.contexts_kept // max(self.captions, 1))


def expected_counts(config: PipelineConfig, vocab: ClassVocabulary) -> CountPlan:
    classes = len(vocab)
    cdis = classes * config.num_cdis_per_class
    captions = cdis * config.captions_per_cdi
    zs_generated = config.zero_shot_templates * config.images_per_zero_shot_template
    fg_sets = classes * len(config.fg_templates)
    return CountPlan(
        num_classes=classes,
        cdis=cdis,
        captions=captions,
        contexts_generated=captions * config.images_per_caption,
        contexts_kept=captions * config.keep_per_caption,
        zero_shot_generated=zs_generated,
        zero_shot_backgrounds=zs_generated - prune_count(zs_generated, config.zero_shot_prune_fraction),
        fg_generated=fg_sets * config.fg_images_per_template,
        fg_kept=fg_sets * config.fg_keep_per_template,
        paste_attempts=config.target_dataset_size * config.pastes_per_image,
    )
