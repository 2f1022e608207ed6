"""Context background generation: from CDI captions or from zero-shot prompts."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from synthcomp.config import derive_seed
from synthcomp.filtering import filter_backgrounds, kept_indices, prune_decisions, write_filter_log
from synthcomp.foreground import class_prompt
from synthcomp.gateway import BackendError
from synthcomp.imaging import decode_png, encode_png, pixel_digest
from synthcomp.prompts import (
    Caption,
    expand_context_words,
    extract_context_words,
    synthesize_context_sentences,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass(eq=False)
class BackgroundAsset:
    pixels: np.ndarray
    prompt: str
    caption_similarity: float | None = None
    max_class_similarity: float | None = None
    _digest: str | None = field(default=None, repr=False)

    @property
    def digest(self) -> str:
        if self._digest is None:
            self._digest = pixel_digest(self.pixels)
        return self._digest

    def sidecar(self) -> dict:
        def r(v):
            return None if v is None else round(v, 6)

        return {
            "prompt": self.prompt,
            "caption_similarity": r(self.caption_similarity),
            "max_class_similarity": r(self.max_class_similarity),
        }


def save_backgrounds(backgrounds, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for bg in backgrounds:
        (root / f"{bg.digest}.png").write_bytes(encode_png(bg.pixels))
        (root / f"{bg.digest}.json").write_text(json.dumps(bg.sidecar(), sort_keys=True) + "\n")


def load_backgrounds(root) -> list[BackgroundAsset]:
    out = []
    for png in sorted(Path(root).glob("*.png")):
        meta_path = png.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        out.append(
            BackgroundAsset(
                decode_png(png.read_bytes()),
                meta.get("prompt", ""),
                meta.get("caption_similarity"),
                meta.get("max_class_similarity"),
            )
        )
    return out


def find_cdis(cdi_dir, vocab, per_class: int) -> list[tuple[str, Path]]:
    """CDI images as ``(cdi_id, path)``.

    A directory with one subfolder per class label contributes up to
    ``per_class`` images per class; a flat directory is treated as a pooled
    set and contributes up to ``per_class * len(vocab)`` images.
    """
    root = Path(cdi_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"CDI directory not found: {root}")

    def images(folder):
        return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

    subdirs = {p.name: p for p in root.iterdir() if p.is_dir()}
    if subdirs:
        out = []
        for label in vocab.labels:
            if label in subdirs:
                out += [(f"{label}/{p.name}", p) for p in images(subdirs[label])[:per_class]]
        return out
    return [(p.name, p) for p in images(root)[: per_class * len(vocab)]]


@dataclass
class BackgroundStats:
    cdis: int = 0
    captions: int = 0
    generated: int = 0
    kept: int = 0
    rejected: int = 0
    duplicates: int = 0
    prompts: int = 0

    def as_counts(self) -> dict:
        return dict(self.__dict__)


def class_embeddings(vocab, config, gateway) -> np.ndarray:
    return gateway.embed(texts=[class_prompt(c.label, config.class_prompt_template) for c in vocab])


def context_prompts(caption: Caption, vocab, lexicon, config) -> list[Caption]:
    """Context sentences for one caption; the caption itself when no context word survives."""
    words = expand_context_words(extract_context_words(caption, vocab, lexicon), lexicon, vocab)
    sentences = synthesize_context_sentences(words, config.context_templates)
    return sentences or [caption]


def _dedupe_into(out: list, seen: set, asset: BackgroundAsset, stats: BackgroundStats) -> None:
    if asset.digest in seen:
        stats.duplicates += 1
        return
    seen.add(asset.digest)
    out.append(asset)


def build_context_backgrounds(cdis, vocab, lexicon, config, gateway, filter_log=None, captions_out=None):
    """Caption each CDI, turn captions into context prompts, generate and filter.

    Each caption yields ``images_per_caption`` candidates spread round-robin
    over its context sentences; the two-rule filter keeps
    ``keep_per_caption`` of them.
    """
    stats = BackgroundStats()
    class_embs = class_embeddings(vocab, config, gateway)
    out, seen = [], set()
    for cdi_index, (cdi_id, image) in enumerate(cdis):
        stats.cdis += 1
        try:
            captions = gateway.caption_image(image, config.captions_per_cdi, provenance=cdi_id)
        except BackendError as exc:
            raise BackendError(f"captioning CDI {cdi_id}: {exc}") from exc
        for j, caption in enumerate(captions):
            stats.captions += 1
            if captions_out is not None:
                captions_out.append(caption)
            prompts = context_prompts(caption, vocab, lexicon, config)
            stats.prompts += len(prompts)
            M = config.images_per_caption
            handles, prompt_rows = [], []
            try:
                for s, prompt in enumerate(prompts):
                    n = len(range(s, M, len(prompts)))
                    seed = derive_seed(config.master_seed, f"bg_gen/{cdi_index}/{j}/{s}")
                    batch = gateway.generate_images(prompt, n, seed)
                    handles += batch
                    prompt_rows += [s] * len(batch)
                if not handles:
                    continue
                prompt_embs = gateway.embed(texts=[p.text for p in prompts])
                image_embs = gateway.embed(images=handles)
            except BackendError as exc:
                raise BackendError(f"CDI {cdi_id}, caption {j}: {exc}") from exc
            stats.generated += len(handles)
            decisions = filter_backgrounds(
                image_embs,
                prompt_embs[prompt_rows],
                class_embs,
                config.keep_per_caption,
                config.reject_threshold,
                config.filter_mode,
                config.filter_class_weight,
            )
            if filter_log is not None:
                write_filter_log(filter_log, "background_filter", decisions, cdi=cdi_id, caption=caption.text)
            stats.rejected += sum(d.rejected for d in decisions)
            for i in kept_indices(decisions):
                d = decisions[i]
                stats.kept += 1
                _dedupe_into(out, seen, BackgroundAsset(handles[i].pixels, handles[i].prompt.text, d.caption_similarity, d.max_class_similarity), stats)
    logger.info("context backgrounds: %s", stats)
    return out, stats


def build_zero_shot_backgrounds(vocab, config, gateway, filter_log=None):
    """Generate from the zero-shot prompts and prune the most class-like fraction, pooled."""
    stats = BackgroundStats()
    handles = []
    for t in range(config.zero_shot_templates):
        prompt = Caption(config.zero_shot_prompts[t], provenance=f"zero_shot:{t}")
        seed = derive_seed(config.master_seed, f"zs_gen/{t}")
        try:
            handles += gateway.generate_images(prompt, config.images_per_zero_shot_template, seed)
        except BackendError as exc:
            raise BackendError(f"zero-shot template {t} ({prompt.text!r}): {exc}") from exc
        stats.prompts += 1
    stats.generated = len(handles)
    if not handles:
        return [], stats
    class_embs = class_embeddings(vocab, config, gateway)
    image_embs = np.concatenate([gateway.embed(images=handles[i : i + 512]) for i in range(0, len(handles), 512)])
    decisions = prune_decisions(image_embs, class_embs, config.zero_shot_prune_fraction)
    if filter_log is not None:
        write_filter_log(filter_log, "zero_shot_prune", decisions)
    out, seen = [], set()
    for d in decisions:
        if not d.kept:
            stats.rejected += 1
            continue
        stats.kept += 1
        h = handles[d.index]
        _dedupe_into(out, seen, BackgroundAsset(h.pixels, h.prompt.text, None, d.max_class_similarity), stats)
    logger.info("zero-shot backgrounds: %s", stats)
    return out, stats
