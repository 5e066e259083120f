"""Deterministic synthetic multimodal QA task with controlled perturbations.

Each example shows a scene of colored, sized shapes as a set of noisy
feature tokens, plus a templated question about it: the color or size of the
object with a given shape (shapes are unique within a scene), or how many
objects have a given color.  Answers share one class space, so class j means
"color j", "size j" or "count j" depending on the question.

Five perturbation channels probe robustness:

* REPHRASE               re-encodes the same query with another template
* SYNONYM                swaps content words within their synonym classes
* REMOVE_IRRELEVANT      deletes one object the answer does not depend on
* REMOVE_RELEVANT_COUNT  deletes one counted object (the answer drops by one)
* SHORTCUT_COUNTEREXAMPLE plants the spurious answer pattern for a wrong label

The shortcut is a dedicated block of visual-token dimensions that always
carries strong per-example noise; on a ``p_shortcut`` fraction of training
examples a fixed per-answer pattern is added on top.  The pattern is easy to
read (linear, present on every token) but expensive to represent: using it
forces the encoder to transmit the block's noise as well, so it is the first
thing an information-constrained model discards.  The counterexample split
adds the pattern of a wrong answer to otherwise clean examples, so a model
leaning on the shortcut fails there.

Generation is deterministic: every example draws from its own RNG stream
derived from (seed, split, index), and serialization uses a fixed field
order, so identical (config, seed) pairs produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class QuestionKind(Enum):
    COLOR = "color"
    SIZE = "size"
    COUNT = "count"


KINDS = (QuestionKind.COLOR, QuestionKind.SIZE, QuestionKind.COUNT)


class PerturbationKind(Enum):
    REPHRASE = "REPHRASE"
    SYNONYM = "SYNONYM"
    REMOVE_IRRELEVANT = "REMOVE_IRRELEVANT"
    REMOVE_RELEVANT_COUNT = "REMOVE_RELEVANT_COUNT"
    SHORTCUT_COUNTEREXAMPLE = "SHORTCUT_COUNTEREXAMPLE"


ANSWER_PRESERVING = (PerturbationKind.REPHRASE, PerturbationKind.SYNONYM,
                     PerturbationKind.REMOVE_IRRELEVANT)


@dataclass
class PerturbationSpec:
    kind: PerturbationKind
    n_remove: int = 1

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = PerturbationKind(self.kind)
        if self.n_remove < 1:
            raise ValueError("n_remove must be >= 1")


class InapplicablePerturbation(ValueError):
    """Raised when a perturbation does not apply to the given example."""


@dataclass
class TaskConfig:
    objects: int = 2          # M objects per scene
    shapes: int = 3           # shape vocabulary S
    colors: int = 3           # color vocabulary C
    sizes: int = 2            # size vocabulary Z
    visual_tokens: int = 4    # K tokens (objects + background)
    question_tokens: int = 6  # L tokens, last slot is a reserved channel
    rep_dim: int = 32         # representation width d
    answers: int = 3          # answer classes A
    vocab: int = 64
    templates: int = 4        # last one is held out of training
    sigma_v: float = 0.1      # visual token noise
    p_shortcut: float = 0.8
    shortcut_dims: int = 4    # width of the spurious-pattern block
    shortcut_signal: float = 0.6
    shortcut_noise: float = 0.8
    n_train: int = 2048
    n_eval: int = 512

    def __post_init__(self):
        if min(self.objects, self.shapes, self.colors, self.sizes, self.rep_dim,
               self.n_train, self.n_eval, self.shortcut_dims) < 1:
            raise ValueError("task dimensions must be positive")
        if self.objects > self.shapes:
            raise ValueError(
                f"objects ({self.objects}) may not exceed shapes ({self.shapes}); "
                "shapes must be unique within a scene")
        if self.visual_tokens < self.objects:
            raise ValueError(
                f"visual_tokens ({self.visual_tokens}) must be >= objects ({self.objects})")
        expected_answers = max(self.colors, self.sizes, self.objects + 1)
        if self.answers != expected_answers:
            raise ValueError(
                f"answers ({self.answers}) must equal the attribute cardinality "
                f"max(colors, sizes, objects + 1) = {expected_answers}")
        if self.templates < 2:
            raise ValueError("need at least 2 templates so held-out paraphrases exist")
        if self.question_tokens < 4:
            raise ValueError("question_tokens must be >= 4 (query word, target, "
                             "filler, reserved slot)")
        if not (0.0 <= self.p_shortcut <= 1.0):
            raise ValueError(f"p_shortcut must be in [0, 1], got {self.p_shortcut}")
        if self.sigma_v < 0 or self.shortcut_noise < 0 or self.shortcut_signal < 0:
            raise ValueError("noise and signal scales must be >= 0")
        needed = VocabLayout(self).size
        if self.vocab < needed:
            raise ValueError(f"vocab ({self.vocab}) too small; layout needs {needed} tokens")

    @property
    def token_dim(self) -> int:
        """Visual token width: attribute one-hots, an object flag, and the
        shortcut-pattern block."""
        return self.shapes + self.colors + self.sizes + 1 + self.shortcut_dims

    @property
    def shortcut_slice(self) -> slice:
        return slice(self.token_dim - self.shortcut_dims, self.token_dim)

    def shortcut_patterns(self) -> np.ndarray:
        """One unit-norm pattern per answer class, fixed across datasets.

        The patterns are part of the task definition (like a benchmark's
        shortcut inventory), so they come from a constant-seed stream rather
        than the dataset seed."""
        rng = np.random.default_rng(np.random.SeedSequence(0x51B, spawn_key=(1,)))
        pats = rng.standard_normal((self.answers, self.shortcut_dims))
        pats /= np.linalg.norm(pats, axis=1, keepdims=True)
        return self.shortcut_signal * pats

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        return cls(**d)


class VocabLayout:
    """Token-id layout of the question vocabulary.

    Content words (query words, shape words, color words) come in synonym
    pairs; filler words are template-specific; the neutral token fills the
    reserved final question slot.
    """

    PAD = 0
    NEUTRAL = 1

    def __init__(self, cfg: TaskConfig):
        self.cfg = cfg
        self.qword_base = 2
        self.shape_base = self.qword_base + 2 * len(KINDS)
        self.color_base = self.shape_base + 2 * cfg.shapes
        self.filler_base = self.color_base + 2 * cfg.colors
        self.fillers_per_template = cfg.question_tokens - 3
        self.size = self.filler_base + cfg.templates * self.fillers_per_template

    def qword(self, kind: QuestionKind, variant: int) -> int:
        return self.qword_base + 2 * KINDS.index(kind) + variant

    def shape_word(self, shape: int, variant: int) -> int:
        return self.shape_base + 2 * shape + variant

    def color_word(self, color: int, variant: int) -> int:
        return self.color_base + 2 * color + variant

    def fillers(self, template_id: int) -> list[int]:
        start = self.filler_base + template_id * self.fillers_per_template
        return list(range(start, start + self.fillers_per_template))


@dataclass
class SceneObject:
    shape: int
    color: int
    size: int


@dataclass
class Scene:
    objects: list[SceneObject]

    def to_dict(self) -> dict:
        return {"objects": [[o.shape, o.color, o.size] for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(objects=[SceneObject(*row) for row in d["objects"]])


@dataclass
class ExampleMeta:
    example_id: str
    group_id: int
    is_original: bool
    queried_attribute: str
    template_id: int
    referent_shape: int   # -1 for count questions
    target_color: int     # -1 unless a count question
    syn_q: int
    syn_target: int
    shortcut_token_present: bool
    perturbation: str     # "none" or a PerturbationKind value


@dataclass
class SyntheticExample:
    x_v: np.ndarray       # (K, token_dim) float64
    x_l: list[int]        # L token ids
    y: int
    scene: Scene
    meta: ExampleMeta

    @property
    def kind(self) -> QuestionKind:
        return QuestionKind(self.meta.queried_attribute)


def answer_for(scene: Scene, kind: QuestionKind, referent_shape: int,
               target_color: int) -> int:
    """Direct attribute lookup in the scene; the generator's own bookkeeping
    and any serialized example must agree with this scan."""
    if kind is QuestionKind.COUNT:
        return sum(1 for o in scene.objects if o.color == target_color)
    for o in scene.objects:
        if o.shape == referent_shape:
            return o.color if kind is QuestionKind.COLOR else o.size
    raise ValueError(f"scene has no object with shape {referent_shape}")


def _template_order(kind: QuestionKind, template_id: int, n_slots: int) -> tuple[int, ...]:
    """Deterministic token arrangement for one (kind, template) pair."""
    perms = list(itertools.permutations(range(n_slots)))
    return perms[(KINDS.index(kind) * 7 + template_id * 3 + 1) % len(perms)]


def encode_question(cfg: TaskConfig, kind: QuestionKind, referent_shape: int,
                    target_color: int, template_id: int, syn_q: int,
                    syn_target: int) -> list[int]:
    """Lay out the question tokens for one template.

    The first L-1 slots hold a template-specific permutation of the query
    word, the target word, and the template's filler words; the final slot
    is a reserved channel that always carries the neutral token.
    """
    layout = VocabLayout(cfg)
    qword = layout.qword(kind, syn_q)
    if kind is QuestionKind.COUNT:
        target = layout.color_word(target_color, syn_target)
    else:
        target = layout.shape_word(referent_shape, syn_target)
    content = [qword, target] + layout.fillers(template_id)
    order = _template_order(kind, template_id, len(content))
    tokens = [content[i] for i in order]
    tokens.append(layout.NEUTRAL)
    return tokens


def encode_scene(cfg: TaskConfig, scene: Scene, rng: np.random.Generator,
                 shortcut_answer: int | None = None) -> np.ndarray:
    """Object tokens are attribute one-hots with an object flag; the
    remaining slots are zero background tokens.  Attribute dimensions carry
    Gaussian noise of scale sigma_v; the shortcut block always carries noise
    of scale shortcut_noise, plus the answer's pattern when a shortcut is
    planted."""
    x = np.zeros((cfg.visual_tokens, cfg.token_dim))
    attr = cfg.token_dim - cfg.shortcut_dims
    for slot, obj in enumerate(scene.objects):
        x[slot, obj.shape] = 1.0
        x[slot, cfg.shapes + obj.color] = 1.0
        x[slot, cfg.shapes + cfg.colors + obj.size] = 1.0
        x[slot, attr - 1] = 1.0
    x[:, :attr] += cfg.sigma_v * rng.standard_normal((cfg.visual_tokens, attr))
    x[:, cfg.shortcut_slice] = cfg.shortcut_noise * rng.standard_normal(
        (cfg.visual_tokens, cfg.shortcut_dims))
    if shortcut_answer is not None:
        x[:, cfg.shortcut_slice] += cfg.shortcut_patterns()[shortcut_answer]
    return x


def _background_token(cfg: TaskConfig, rng: np.random.Generator) -> np.ndarray:
    vec = np.zeros(cfg.token_dim)
    attr = cfg.token_dim - cfg.shortcut_dims
    vec[:attr] = cfg.sigma_v * rng.standard_normal(attr)
    vec[cfg.shortcut_slice] = cfg.shortcut_noise * rng.standard_normal(cfg.shortcut_dims)
    return vec


def _example_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


def _random_scene(cfg: TaskConfig, rng: np.random.Generator) -> Scene:
    shapes = rng.choice(cfg.shapes, size=cfg.objects, replace=False)
    colors = rng.integers(0, cfg.colors, size=cfg.objects)
    sizes = rng.integers(0, cfg.sizes, size=cfg.objects)
    return Scene(objects=[SceneObject(int(s), int(c), int(z))
                          for s, c, z in zip(shapes, colors, sizes)])


def _random_question(cfg: TaskConfig, scene: Scene, rng: np.random.Generator):
    kind = KINDS[rng.integers(0, len(KINDS))]
    if kind is QuestionKind.COUNT:
        referent_shape = -1
        target_color = int(rng.integers(0, cfg.colors))
    else:
        referent_shape = scene.objects[rng.integers(0, cfg.objects)].shape
        target_color = -1
    return kind, referent_shape, target_color


def make_example(cfg: TaskConfig, rng: np.random.Generator, example_id: str,
                 group_id: int, template_id: int, with_shortcut: bool,
                 count_only: bool = False) -> SyntheticExample:
    scene = _random_scene(cfg, rng)
    if count_only:
        # Count questions whose answer is at least 1, so one counted object
        # can later be removed.
        present = [o.color for o in scene.objects]
        kind = QuestionKind.COUNT
        referent_shape = -1
        target_color = int(present[rng.integers(0, len(present))])
    else:
        kind, referent_shape, target_color = _random_question(cfg, scene, rng)
    y = answer_for(scene, kind, referent_shape, target_color)
    syn_q = int(rng.integers(0, 2))
    syn_target = int(rng.integers(0, 2))
    x_l = encode_question(cfg, kind, referent_shape, target_color, template_id,
                          syn_q, syn_target)
    x_v = encode_scene(cfg, scene, rng, shortcut_answer=y if with_shortcut else None)
    meta = ExampleMeta(
        example_id=example_id, group_id=group_id, is_original=True,
        queried_attribute=kind.value, template_id=template_id,
        referent_shape=referent_shape, target_color=target_color,
        syn_q=syn_q, syn_target=syn_target,
        shortcut_token_present=with_shortcut, perturbation="none")
    return SyntheticExample(x_v=x_v, x_l=x_l, y=y, scene=scene, meta=meta)


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

def _copy_example(ex: SyntheticExample) -> SyntheticExample:
    return SyntheticExample(
        x_v=ex.x_v.copy(), x_l=list(ex.x_l), y=ex.y,
        scene=Scene(objects=[dataclasses.replace(o) for o in ex.scene.objects]),
        meta=dataclasses.replace(ex.meta))


def _reencode_question(cfg: TaskConfig, ex: SyntheticExample) -> None:
    ex.x_l = encode_question(cfg, ex.kind, ex.meta.referent_shape,
                             ex.meta.target_color, ex.meta.template_id,
                             ex.meta.syn_q, ex.meta.syn_target)


def _remove_object(cfg: TaskConfig, ex: SyntheticExample, obj_index: int,
                   rng: np.random.Generator) -> None:
    """Turn one object token into a background token and drop it from the scene."""
    ex.x_v[obj_index] = _background_token(cfg, rng)
    del ex.scene.objects[obj_index]


def perturb(ex: SyntheticExample, spec: PerturbationSpec, cfg: TaskConfig,
            seed: int) -> SyntheticExample:
    """Apply one perturbation channel; answer-preserving kinds never change y.

    Returns a new example sharing the source's example_id and group_id so
    that clean and perturbed splits stay paired.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,)))
    out = _copy_example(ex)
    out.meta.perturbation = spec.kind.value
    out.meta.is_original = False

    if spec.kind is PerturbationKind.REPHRASE:
        options = [t for t in range(cfg.templates) if t != ex.meta.template_id]
        out.meta.template_id = options[rng.integers(0, len(options))]
        _reencode_question(cfg, out)
        return out

    if spec.kind is PerturbationKind.SYNONYM:
        out.meta.syn_q = 1 - ex.meta.syn_q
        out.meta.syn_target = 1 - ex.meta.syn_target
        _reencode_question(cfg, out)
        return out

    if spec.kind is PerturbationKind.REMOVE_IRRELEVANT:
        if ex.kind is QuestionKind.COUNT:
            candidates = [i for i, o in enumerate(ex.scene.objects)
                          if o.color != ex.meta.target_color]
        else:
            candidates = [i for i, o in enumerate(ex.scene.objects)
                          if o.shape != ex.meta.referent_shape]
        for _ in range(min(spec.n_remove, len(candidates))):
            pick = candidates[rng.integers(0, len(candidates))]
            _remove_object(cfg, out, pick, rng)
            candidates = [i if i < pick else i - 1 for i in candidates if i != pick]
        return out

    if spec.kind is PerturbationKind.REMOVE_RELEVANT_COUNT:
        if ex.kind is not QuestionKind.COUNT:
            raise InapplicablePerturbation(
                "REMOVE_RELEVANT_COUNT applies only to counting questions")
        if ex.y < 1:
            raise InapplicablePerturbation("no counted object to remove (answer is 0)")
        candidates = [i for i, o in enumerate(ex.scene.objects)
                      if o.color == ex.meta.target_color]
        pick = candidates[rng.integers(0, len(candidates))]
        _remove_object(cfg, out, pick, rng)
        out.y = ex.y - 1
        return out

    if spec.kind is PerturbationKind.SHORTCUT_COUNTEREXAMPLE:
        if cfg.p_shortcut == 0.0:
            # No shortcut channel was ever trained, so there is nothing whose
            # association could mislead; the split coincides with its source.
            return out
        wrong = int((ex.y + 1 + rng.integers(0, cfg.answers - 1)) % cfg.answers)
        out.x_v[:, cfg.shortcut_slice] += cfg.shortcut_patterns()[wrong]
        out.meta.shortcut_token_present = True
        return out

    raise ValueError(f"unknown perturbation kind {spec.kind}")


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

EVAL_SPLITS = ("clean", "rephrase", "synonym", "remove_irrelevant",
               "counterexample", "count_clean", "remove_relevant")


@dataclass
class Dataset:
    config: TaskConfig
    seed: int
    splits: dict[str, list[SyntheticExample]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[SyntheticExample]:
        return self.splits[split]


def generate_dataset(cfg: TaskConfig, seed: int) -> Dataset:
    """Build the train split plus all evaluation splits deterministically."""
    train_templates = cfg.templates - 1
    ds = Dataset(config=cfg, seed=seed)

    train = []
    for i in range(cfg.n_train):
        rng = _example_rng(seed, 0, i)
        template = int(rng.integers(0, train_templates))
        with_shortcut = bool(rng.random() < cfg.p_shortcut)
        train.append(make_example(cfg, rng, f"train-{i}", group_id=i,
                                  template_id=template, with_shortcut=with_shortcut))
    ds.splits["train"] = train

    clean = []
    for i in range(cfg.n_eval):
        rng = _example_rng(seed, 1, i)
        template = int(rng.integers(0, train_templates))
        clean.append(make_example(cfg, rng, f"clean-{i}", group_id=i,
                                  template_id=template, with_shortcut=False))
    ds.splits["clean"] = clean

    def perturbed_copy(kind: PerturbationKind, split_offset: int,
                       source: list[SyntheticExample]) -> list[SyntheticExample]:
        return [perturb(ex, PerturbationSpec(kind), cfg,
                        seed=_derive_seed(seed, split_offset, j))
                for j, ex in enumerate(source)]

    ds.splits["synonym"] = perturbed_copy(PerturbationKind.SYNONYM, 2, clean)
    ds.splits["remove_irrelevant"] = perturbed_copy(
        PerturbationKind.REMOVE_IRRELEVANT, 3, clean)
    ds.splits["counterexample"] = perturbed_copy(
        PerturbationKind.SHORTCUT_COUNTEREXAMPLE, 4, clean)

    rephrase = []
    n_groups = max(1, cfg.n_eval // cfg.templates)
    for g in range(n_groups):
        rng = _example_rng(seed, 5, g)
        template = int(rng.integers(0, train_templates))
        original = make_example(cfg, rng, f"rephrase-{g}-0", group_id=g,
                                template_id=template, with_shortcut=False)
        rephrase.append(original)
        others = [t for t in range(cfg.templates) if t != template]
        for j, t in enumerate(others, start=1):
            re_ex = _copy_example(original)
            re_ex.meta.example_id = f"rephrase-{g}-{j}"
            re_ex.meta.is_original = False
            re_ex.meta.perturbation = PerturbationKind.REPHRASE.value
            re_ex.meta.template_id = t
            _reencode_question(cfg, re_ex)
            rephrase.append(re_ex)
    ds.splits["rephrase"] = rephrase

    count_clean = []
    for i in range(cfg.n_eval):
        rng = _example_rng(seed, 7, i)
        template = int(rng.integers(0, train_templates))
        count_clean.append(make_example(cfg, rng, f"count-{i}", group_id=i,
                                        template_id=template, with_shortcut=False,
                                        count_only=True))
    ds.splits["count_clean"] = count_clean
    ds.splits["remove_relevant"] = perturbed_copy(
        PerturbationKind.REMOVE_RELEVANT_COUNT, 8, count_clean)
    return ds


def _derive_seed(seed: int, stream: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(stream, index)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Serialization: JSON lines with a fixed field order
# ---------------------------------------------------------------------------

FIELD_ORDER = ("example_id", "group_id", "is_original", "queried_attribute",
               "template_id", "referent_shape", "target_color", "syn_q",
               "syn_target", "shortcut_token_present", "perturbation", "y",
               "x_l", "x_v", "scene")


def example_to_dict(ex: SyntheticExample) -> dict:
    m = ex.meta
    return {
        "example_id": m.example_id,
        "group_id": m.group_id,
        "is_original": m.is_original,
        "queried_attribute": m.queried_attribute,
        "template_id": m.template_id,
        "referent_shape": m.referent_shape,
        "target_color": m.target_color,
        "syn_q": m.syn_q,
        "syn_target": m.syn_target,
        "shortcut_token_present": m.shortcut_token_present,
        "perturbation": m.perturbation,
        "y": ex.y,
        "x_l": list(ex.x_l),
        "x_v": ex.x_v.tolist(),
        "scene": ex.scene.to_dict(),
    }


def example_from_dict(d: dict) -> SyntheticExample:
    meta = ExampleMeta(
        example_id=d["example_id"], group_id=d["group_id"],
        is_original=d["is_original"], queried_attribute=d["queried_attribute"],
        template_id=d["template_id"], referent_shape=d["referent_shape"],
        target_color=d["target_color"], syn_q=d["syn_q"],
        syn_target=d["syn_target"],
        shortcut_token_present=d["shortcut_token_present"],
        perturbation=d["perturbation"])
    return SyntheticExample(
        x_v=np.asarray(d["x_v"], dtype=np.float64), x_l=list(d["x_l"]),
        y=d["y"], scene=Scene.from_dict(d["scene"]), meta=meta)


def split_to_jsonl(examples: list[SyntheticExample]) -> str:
    return "".join(json.dumps(example_to_dict(ex), separators=(",", ":")) + "\n"
                   for ex in examples)


def split_from_jsonl(text: str) -> list[SyntheticExample]:
    return [example_from_dict(json.loads(line)) for line in text.splitlines() if line]


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": ds.config.to_dict(),
        "seed": ds.seed,
        "splits": sorted(ds.splits),
        "field_order": list(FIELD_ORDER),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for name, examples in sorted(ds.splits.items()):
        (out / f"{name}.jsonl").write_text(split_to_jsonl(examples))


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    cfg = TaskConfig.from_dict(manifest["config"])
    ds = Dataset(config=cfg, seed=manifest["seed"])
    for name in manifest["splits"]:
        ds.splits[name] = split_from_jsonl((src / f"{name}.jsonl").read_text())
    return ds


def dataset_bytes(ds: Dataset) -> bytes:
    """Canonical byte serialization of all splits, for determinism checks."""
    parts = [f"#{name}\n{split_to_jsonl(ds.splits[name])}" for name in sorted(ds.splits)]
    return "".join(parts).encode()
