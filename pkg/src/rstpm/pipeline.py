"""End-to-end desk workflow: corpus -> pretrained teachers -> students -> maps -> AUC."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field, fields

import torch

from .backbones import DecoderSpec, PretextConfig, PyramidSpec, build_network, pretrain_teacher
from .bundle import ModelBundle
from .data import LabeledCorpus, gen_pretext, gen_synthetic
from .distill import TrainConfig, make_gates, train_student_A, train_student_B
from .errors import ConfigError

log = logging.getLogger(__name__)


def _ints(s) -> tuple[int, ...]:
    if isinstance(s, str):
        return tuple(int(v) for v in s.replace(" ", "").split(",") if v)
    return tuple(int(v) for v in s)


def _floats(s: str) -> tuple[float, ...] | None:
    try:
        vals = tuple(float(v) for v in s.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {s!r}") from exc
    return vals or None


@dataclass
class RunConfig:
    """Every knob of a run, flat so it maps one-to-one onto a key=value config file."""
    seed: int = 0
    category: str = "synthetic"
    image_size: int = 64
    # synthetic corpus
    n_train: int = 200
    n_test_normal: int = 50
    n_test_defect: int = 50
    # teachers
    teacher_a_stem: int = 16
    teacher_a_blocks: str = "1,1,1,1"
    teacher_a_channels: str = "16,32,64,128"
    teacher_b_stem: int = 24
    teacher_b_blocks: str = "2,2,2,2"
    teacher_b_channels: str = "24,48,96,192"
    teacher_b: str = "deeper"            # deeper | same
    decoder_widths: str = ""             # empty: teacher-B tap channels
    decoder_blocks: int = 1
    pretext_k: int = 8
    pretext_per_class: int = 50
    pretext_epochs: int = 15
    pretext_lr: float = 0.05
    pretext_batch: int = 32
    skip_pretext: bool = False
    # students
    lr: float = 0.4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    attention: bool = True
    baseline_only: bool = False
    # scoring
    input_mean: str = ""                 # e.g. "0.485,0.456,0.406"; empty keeps raw [0, 1] input
    input_std: str = ""
    normalize_maps: bool = False
    per_image_pixel_auc: bool = False
    min_pixel_auc: float = 0.0
    min_image_auc: float = 0.0

    def validate(self) -> None:
        if self.teacher_b not in ("deeper", "same"):
            raise ConfigError(f"teacher_b must be 'deeper' or 'same', got {self.teacher_b!r}")
        self.train_config().validate()
        for s in self.teacher_specs():
            s.validate()

    def teacher_specs(self) -> tuple[PyramidSpec, PyramidSpec]:
        norm = dict(input_mean=_floats(self.input_mean), input_std=_floats(self.input_std))
        a = PyramidSpec(self.teacher_a_stem, 2, _ints(self.teacher_a_blocks), _ints(self.teacher_a_channels),
                        **norm)
        b = PyramidSpec(self.teacher_b_stem, 2, _ints(self.teacher_b_blocks), _ints(self.teacher_b_channels),
                        **norm)
        return a, b

    def train_config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                          batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
                          image_size=self.image_size, attention_enabled=self.attention)
        return dataclasses.replace(cfg, **overrides)

    def pretext_config(self) -> PretextConfig:
        return PretextConfig(lr=self.pretext_lr, batch_size=self.pretext_batch,
                             epochs=self.pretext_epochs, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


# derived seeds so every component has its own deterministic stream
def _seed(cfg: RunConfig, offset: int) -> int:
    return cfg.seed * 1000 + offset


def make_corpus(cfg: RunConfig) -> tuple[LabeledCorpus, LabeledCorpus]:
    return gen_synthetic(cfg.n_train, cfg.n_test_normal, cfg.n_test_defect, seed=cfg.seed,
                         image_size=cfg.image_size, category=cfg.category)


def make_teacher(cfg: RunConfig, which: str):
    spec_a, spec_b = cfg.teacher_specs()
    spec, role, off = (spec_a, "teacher-A", 1) if which == "A" else (spec_b, "teacher-B", 2)
    net = build_network(role, spec, _seed(cfg, off))
    pretext = gen_pretext(cfg.pretext_k, cfg.pretext_per_class, _seed(cfg, 3), cfg.image_size)
    heldout = gen_pretext(cfg.pretext_k, max(4, cfg.pretext_per_class // 4), _seed(cfg, 4), cfg.image_size)
    return pretrain_teacher(net, pretext, cfg.pretext_config(), heldout, skip=cfg.skip_pretext)


def make_teachers(cfg: RunConfig):
    return make_teacher(cfg, "A"), make_teacher(cfg, "B")


def train_bundle(cfg: RunConfig, teacher_a, teacher_b, train: LabeledCorpus,
                 attention: bool | None = None, teacher_b_kind: str | None = None,
                 baseline_only: bool | None = None) -> tuple[ModelBundle, dict]:
    """Train student-A (+ gates) and, unless baseline-only, student-B (+ gates)."""
    attention = cfg.attention if attention is None else attention
    teacher_b_kind = teacher_b_kind or cfg.teacher_b
    baseline_only = cfg.baseline_only if baseline_only is None else baseline_only
    tcfg = cfg.train_config(attention_enabled=attention)
    if teacher_b_kind == "same":
        teacher_b = teacher_a

    student_a = build_network("student-A", teacher_a.spec, _seed(cfg, 5))
    gates_a = make_gates("A", teacher_a) if attention else None
    student_a, gates_a, rep_a = train_student_A(teacher_a, student_a, gates_a, train, tcfg)
    bundle = ModelBundle(teacher_a=teacher_a, student_a=student_a, gates_a=gates_a, config=tcfg)
    reports = {"A": rep_a}
    if not baseline_only:
        dspec = DecoderSpec.for_teachers(teacher_a.spec, teacher_b.spec,
                                         _ints(cfg.decoder_widths) or None)
        dspec = dataclasses.replace(dspec, blocks_per_level=cfg.decoder_blocks)
        decoder = build_network("student-B", dspec, _seed(cfg, 6))
        gates_b = make_gates("B", teacher_b) if attention else None
        decoder, gates_b, rep_b = train_student_B(teacher_a, teacher_b, decoder, gates_b, train, tcfg)
        bundle.teacher_b, bundle.student_b, bundle.gates_b = teacher_b, decoder, gates_b
        reports["B"] = rep_b
    bundle.meta = {"teacher_b": teacher_b_kind, "attention": attention,
                   "losses": {k: r.to_meta() for k, r in reports.items()},
                   "run_config": cfg.to_dict()}
    return bundle, reports


@dataclass
class DeskRun:
    config: RunConfig
    train: LabeledCorpus
    test: LabeledCorpus
    bundles: dict = field(default_factory=dict)
    loss_reports: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)


def run_desk(cfg: RunConfig, plan=None) -> DeskRun:
    """Full desk pipeline; with an ablation ``plan`` trains every bundle the plan needs."""
    from .anomaly import infer
    from .evaluate import AblationPlan, ablate, bundle_key, evaluate

    cfg.validate()
    torch.manual_seed(cfg.seed)
    train, test = make_corpus(cfg)
    teacher_a, teacher_b = make_teachers(cfg)
    run = DeskRun(cfg, train, test)
    keys = plan.bundle_keys() if plan is not None else [bundle_key(cfg.attention, cfg.teacher_b)]
    for key in keys:
        att = key.startswith("att-on")
        kind = key.rsplit("tb-", 1)[1]
        run.bundles[key], run.loss_reports[key] = train_bundle(cfg, teacher_a, teacher_b, train, att, kind)
    if plan is None:
        key = keys[0]
        res = infer(run.bundles[key], test.images, normalize_maps=cfg.normalize_maps)
        run.results[key] = res
        run.reports = [evaluate(res, test, cfg.per_image_pixel_auc,
                                {"mode": run.bundles[key].mode, "fusion": run.bundles[key].mode,
                                 "attention": "on" if cfg.attention else "off",
                                 "teacher_b": cfg.teacher_b})]
    else:
        run.reports = ablate(run.bundles, test, plan, cfg.per_image_pixel_auc)
    return run
