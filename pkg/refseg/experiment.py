import json
import logging
import os

from dataclasses import asdict, dataclass, field, fields, replace

from refseg.augment import make_overlay
from refseg.conf import ImproperlyConfigured
from refseg.data import (
    entry_stem,
    generate_synthetic,
    load_manifest,
    load_mask,
    load_split,
    save_mask,
    save_rgb,
    split_labeled,
    write_manifest,
)
from refseg.metrics import evaluate, write_report_csv
from refseg.segmenter import (
    PretrainConfig,
    SegmenterConfig,
    assistant_label_map,
    evaluate_assistant,
    load_segmenter,
    save_segmenter,
    train_stage1,
)
from refseg.ssl import (
    SSLConfig,
    evaluate_net,
    load_student,
    predict_labels,
    save_student,
    train_stage2,
)
from refseg.storage import load_checkpoint, write_records_csv
from refseg.templatebank import build_bank
from refseg.utils import config_hash, substream


logger = logging.getLogger(__name__)


SEGMENTER_FILE = "segmenter.json"
STUDENT_FILE = "student.json"
TEACHER_FILE = "teacher.json"
BANK_DIR = "bank"
ABLATION_VARIANTS = (
    ("full", {}),
    ("no-prompt", {"use_prompt": False}),
    ("no-memory", {"use_memory": False}),
    ("no-feedback", {"use_feedback": False}),
)


@dataclass
class CorpusConfig:
    patients: int = 20
    slices: int = 4
    classes: int = 2
    size: int = 64
    test_fraction: float = 0.2
    pretrain_patients: int = 20


@dataclass
class ExperimentConfig:
    data: str = "data"
    out: str = "runs"
    ratio: float = 0.05
    seed: int = 1
    temperature: float = 0.1
    use_prompt: bool = True
    use_memory: bool = True
    use_feedback: bool = True
    use_assistant: bool = True
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def segmenter_config(self, num_classes=None):
        return replace(
            self.segmenter,
            num_classes=num_classes or self.segmenter.num_classes,
            use_prompt=self.use_prompt,
            use_memory=self.use_memory,
        )

    def ssl_config(self):
        return replace(
            self.ssl,
            use_feedback=self.use_feedback,
            use_assistant=self.use_assistant,
        )

    def to_dict(self):
        return asdict(self)

    @property
    def hash(self):
        return config_hash(self.to_dict())

    @property
    def header(self):
        return {"config_hash": self.hash, "seed": self.seed}

    def path(self, *parts):
        return os.path.join(self.out, *parts)


NESTED = {
    "corpus": CorpusConfig,
    "segmenter": SegmenterConfig,
    "pretrain": PretrainConfig,
    "ssl": SSLConfig,
}


def _build(cls, values, where):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ImproperlyConfigured(
            f"Unknown {where} keys: {', '.join(unknown)}"
        )
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ImproperlyConfigured(f"Invalid {where} configuration: {e}")


def load_config(path=None, overrides=None):
    """
    Dataclass defaults, updated by the JSON file at path, updated by the
    non-None entries of overrides. Override keys may name nested fields as
    "section.key".
    """
    raw = {}
    if path is not None:
        try:
            with open(path, "r") as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ImproperlyConfigured(f"Unable to read config {path}: {e}")
        if not isinstance(raw, dict):
            raise ImproperlyConfigured(f"Config {path} must be a JSON object")
    sections = {name: dict(raw.pop(name, {}) or {}) for name in NESTED}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            sections[section][name] = value
        else:
            raw[key] = value
    values = dict(raw)
    for name, cls in NESTED.items():
        values[name] = _build(cls, sections[name], name)
    return _build(ExperimentConfig, values, "experiment")


# commands

def run_generate(config, root=None, seed=None):
    seed = config.seed if seed is None else seed
    root = root or config.data
    corpus = config.corpus
    manifest = generate_synthetic(
        seed,
        corpus.patients,
        corpus.slices,
        corpus.classes,
        corpus.size,
        root,
        test_fraction=corpus.test_fraction,
    )
    manifest = split_labeled(manifest, config.ratio, config.seed)
    write_manifest(manifest)
    return manifest


def run_pretrain(config, manifest=None, out=None):
    """Train the segmenter on a labeled corpus, score it on its test split."""
    manifest = manifest or load_manifest(config.data)
    out = out or config.out
    seg_config = config.segmenter_config(manifest.num_classes)
    bank = build_bank(manifest, "labeled", config.temperature)
    model, curve = train_stage1(
        manifest, bank, seg_config, config.pretrain, config.seed
    )
    save_segmenter(
        model, os.path.join(out, SEGMENTER_FILE), config.seed, config.hash
    )
    bank.save(os.path.join(out, BANK_DIR))
    write_records_csv(
        os.path.join(out, "pretrain_loss.csv"),
        curve,
        header=config.header,
        columns=["step", "total", "text", "mask"],
    )
    report = None
    if manifest.entries_for("test"):
        report = evaluate_assistant(model, manifest, bank, "test", config.seed)
        write_report_csv(
            report, os.path.join(out, "pretrain_eval.csv"), config.header
        )
    return model, curve, report


def run_ssl(config, segmenter=None, manifest=None, out=None):
    manifest = manifest or load_manifest(config.data)
    out = out or config.out
    ssl_config = config.ssl_config()
    bank = None
    if ssl_config.use_assistant:
        if segmenter is None:
            raise ImproperlyConfigured(
                "A pretrained segmenter is required unless the assistant is off"
            )
        bank = build_bank(manifest, "labeled", config.temperature)
    else:
        segmenter = None
    state = train_stage2(manifest, segmenter, bank, ssl_config, config.seed)
    save_student(
        state.student, os.path.join(out, STUDENT_FILE), "student",
        ssl_config, config.seed, config.hash,
    )
    save_student(
        state.teacher, os.path.join(out, TEACHER_FILE), "teacher",
        ssl_config, config.seed, config.hash,
    )
    write_records_csv(
        os.path.join(out, "ssl_log.csv"), state.history, header=config.header
    )
    if state.final_report is not None:
        write_report_csv(
            state.final_report, os.path.join(out, "ssl_eval.csv"), config.header
        )
    return state


def load_predictor(config, checkpoint, manifest):
    """Callable image -> label map for a student, teacher or segmenter file."""
    kind = load_checkpoint(checkpoint)["kind"]
    if kind == "segmenter":
        model, _ = load_segmenter(checkpoint)
        bank = build_bank(manifest, "labeled", config.temperature)

        def predict(index, image):
            seed = substream(config.seed, "infer", index)
            return assistant_label_map(model, image, bank, seed)[1]

        return predict
    net, _ = load_student(checkpoint)
    return lambda index, image: predict_labels(net, [image])[0]


def run_infer(config, checkpoint, split="test", overlays=False, out=None):
    manifest = load_manifest(config.data)
    out = out or config.out
    predict = load_predictor(config, checkpoint, manifest)
    written = []
    for index, (entry, image, _) in enumerate(
        load_split(manifest, split, with_masks=False)
    ):
        labels = predict(index, image)
        path = os.path.join(out, "predictions", f"{entry_stem(entry)}.png")
        save_mask(path, labels)
        written.append(path)
        if overlays:
            for class_id in range(1, manifest.num_classes + 1):
                save_rgb(
                    os.path.join(
                        out, "overlays", f"{entry_stem(entry)}_c{class_id}.png"
                    ),
                    make_overlay(image, labels, class_id),
                )
    logger.info(f"Wrote {len(written)} predictions to {out}")
    return written


def run_eval(config, checkpoint=None, predictions=None, split="test", out=None):
    manifest = load_manifest(config.data)
    out = out or config.out
    samples = load_split(manifest, split)
    if predictions is not None:
        preds = [
            load_mask(
                os.path.join(predictions, f"{entry_stem(entry)}.png"),
                manifest.num_classes,
            )
            for entry, _, _ in samples
        ]
        truths = [mask for _, _, mask in samples]
        report = evaluate(preds, truths, manifest.num_classes)
    elif load_checkpoint(checkpoint)["kind"] == "segmenter":
        model, _ = load_segmenter(checkpoint)
        bank = build_bank(manifest, "labeled", config.temperature)
        report = evaluate_assistant(model, manifest, bank, split, config.seed)
    else:
        net, _ = load_student(checkpoint)
        report = evaluate_net(net, samples, manifest.num_classes)
    write_report_csv(report, os.path.join(out, "eval.csv"), config.header)
    return report


# ablations

def _row(name, config, report, reference=False):
    row = {
        "variant": name,
        "reference": int(reference),
        "use_prompt": int(config.use_prompt),
        "use_memory": int(config.use_memory),
        "use_feedback": int(config.use_feedback),
        "use_assistant": int(config.use_assistant),
        "seed": config.seed,
    }
    for class_id, value in report.dice_by_class().items():
        row[f"dice_{class_id}"] = value
    row["mean_dice"] = report.average.dice
    row["mean_iou"] = report.average.iou
    row["mean_hd95"] = (
        float("nan") if report.average.hd95 is None else report.average.hd95
    )
    return row


def run_ablation(config, with_baselines=False):
    """
    Generate a target corpus and a separate annotated pretraining corpus,
    then run the full framework and each single-toggle variant under the
    same master seed.
    """
    target_root = config.path("target")
    pretrain_root = config.path("pretrain-corpus")
    target = run_generate(
        config, target_root, substream(config.seed, "target-corpus")
    )
    corpus = replace(config.corpus, patients=config.corpus.pretrain_patients)
    pretrain_corpus = generate_synthetic(
        substream(config.seed, "pretrain-corpus"),
        corpus.patients,
        corpus.slices,
        corpus.classes,
        corpus.size,
        pretrain_root,
        test_fraction=corpus.test_fraction,
    )

    rows, segmenters = [], {}
    for name, toggles in ABLATION_VARIANTS:
        variant = replace(config, **toggles)
        out = config.path(name)
        key = (variant.use_prompt, variant.use_memory)
        if key not in segmenters:
            segmenters[key] = run_pretrain(variant, pretrain_corpus, out)[0]
        state = run_ssl(variant, segmenters[key], target, out)
        rows.append(_row(name, variant, state.final_report, name == "full"))
        logger.info(
            f"Ablation {name}: mean dice {state.final_report.mean_dice:.4f}"
        )

    if with_baselines:
        variant = replace(config, use_assistant=False)
        state = run_ssl(variant, None, target, config.path("no-assistant"))
        rows.append(_row("no-assistant", variant, state.final_report))
        full = segmenters[(config.use_prompt, config.use_memory)]
        bank = build_bank(target, "labeled", config.temperature)
        report = evaluate_assistant(full, target, bank, "test", config.seed)
        rows.append(_row("assistant-only", config, report))

    write_records_csv(config.path("ablation.csv"), rows, header=config.header)
    return rows


def worst_variant(rows):
    worst = min(rows, key=lambda row: (row["mean_dice"], row["variant"]))
    return worst["variant"]
