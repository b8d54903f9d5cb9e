import csv
import os

import numpy as np
import pytest

from unittest import mock

from refseg.conf import ImproperlyConfigured
from refseg.data import entry_stem, load_manifest, load_mask
from refseg.experiment import (
    ABLATION_VARIANTS,
    load_config,
    run_ablation,
    run_eval,
    run_generate,
    run_infer,
    run_pretrain,
    run_ssl,
    worst_variant,
)
from refseg.metrics import read_header, read_report_csv
from refseg.storage import load_checkpoint
from refseg.templatebank import TemplateBank
from refseg.utils import file_hash

from .fixtures import tiny_config_file  # noqa: F401
from .utils import slow_tests_enabled


@pytest.fixture
def tiny(tmp_path, tiny_config_file):  # noqa: F811
    return load_config(
        tiny_config_file,
        {"data": str(tmp_path / "data"), "out": str(tmp_path / "out")},
    )


def _rows(path):
    with open(path) as f:
        return list(csv.DictReader(line for line in f if line[0] != "#"))


def test_generate_applies_label_split(tiny):
    manifest = run_generate(tiny)
    assert len(manifest.patients("labeled")) == 2
    assert len(manifest.patients("unlabeled")) == 1
    assert load_manifest(tiny.data) == manifest


def test_pretrain_writes_checkpoint_and_curves(tiny):
    run_generate(tiny)
    model, curve, report = run_pretrain(tiny)
    assert len(curve) == tiny.pretrain.steps
    assert os.path.exists(tiny.path("segmenter.json"))
    assert [r["step"] for r in _rows(tiny.path("pretrain_loss.csv"))] == ["0"]
    assert read_header(tiny.path("pretrain_loss.csv"))["seed"] == "1"
    assert read_report_csv(tiny.path("pretrain_eval.csv")) == report
    checkpoint = load_checkpoint(tiny.path("segmenter.json"), "segmenter")
    header = read_header(tiny.path("pretrain_loss.csv"))
    assert checkpoint["config_hash"] == header["config_hash"] == tiny.hash
    bank = TemplateBank.load(tiny.path("bank"))
    assert len(bank) == len(load_manifest(tiny.data).entries_for("labeled"))


def test_ssl_without_assistant(tiny):
    run_generate(tiny)
    tiny.use_assistant = False
    state = run_ssl(tiny)
    for name in ("student.json", "teacher.json", "ssl_log.csv", "ssl_eval.csv"):
        assert os.path.exists(tiny.path(name))
    assert len(_rows(tiny.path("ssl_log.csv"))) == tiny.ssl.iterations
    assert read_report_csv(tiny.path("ssl_eval.csv")) == state.final_report
    header = read_header(tiny.path("ssl_log.csv"))
    for name in ("student.json", "teacher.json"):
        checkpoint = load_checkpoint(tiny.path(name))
        assert checkpoint["config_hash"] == header["config_hash"]


def test_ssl_requires_segmenter_for_assistant(tiny):
    run_generate(tiny)
    with pytest.raises(ImproperlyConfigured):
        run_ssl(tiny)


def test_infer_and_eval_agree(tiny):
    manifest = run_generate(tiny)
    tiny.use_assistant = False
    run_ssl(tiny)
    written = run_infer(tiny, tiny.path("teacher.json"), overlays=True)
    test_entries = manifest.entries_for("test")
    assert len(written) == len(test_entries)
    stem = entry_stem(test_entries[0])
    assert os.path.exists(tiny.path("overlays", f"{stem}_c2.png"))
    from_checkpoint = run_eval(tiny, checkpoint=tiny.path("teacher.json"))
    from_files = run_eval(tiny, predictions=tiny.path("predictions"))
    assert from_checkpoint == from_files


def test_eval_of_ground_truth_is_perfect(tiny):
    manifest = run_generate(tiny)
    folder = os.path.join(manifest.root, "masks")
    report = run_eval(tiny, predictions=folder)
    assert all(m.dice == 1.0 for m in report.per_class.values())
    assert all(m.hd95 in (0.0, None) for m in report.per_class.values())
    mask = load_mask(manifest.mask_path(manifest.entries[0]), 2)
    assert np.isin(mask, [0, 1, 2]).all()


def test_worst_variant_breaks_ties_by_name():
    rows = [
        {"variant": "full", "mean_dice": 0.8},
        {"variant": "no-prompt", "mean_dice": 0.6},
        {"variant": "no-memory", "mean_dice": 0.6},
    ]
    assert worst_variant(rows) == "no-memory"


def test_ablation_shares_segmenters(tiny):
    calls = []

    def fake_pretrain(config, manifest, out):
        calls.append((config.use_prompt, config.use_memory))
        return mock.sentinel.model, [], None

    report = mock.Mock()
    report.dice_by_class.return_value = {1: 0.5, 2: 0.7}
    report.average.dice, report.average.iou, report.average.hd95 = 0.6, 0.4, 2.0
    report.mean_dice = 0.6
    state = mock.Mock(final_report=report)
    with mock.patch(
        "refseg.experiment.run_pretrain", side_effect=fake_pretrain
    ), mock.patch("refseg.experiment.run_ssl", return_value=state) as ssl:
        rows = run_ablation(tiny)
    assert [r["variant"] for r in rows] == [
        "full",
        "no-prompt",
        "no-memory",
        "no-feedback",
    ]
    assert calls == [(True, True), (False, True), (True, False)]
    assert ssl.call_count == 4
    assert rows[0]["reference"] == 1 and rows[3]["use_feedback"] == 0
    written = _rows(tiny.path("ablation.csv"))
    assert [r["variant"] for r in written] == [r["variant"] for r in rows]
    assert written[0]["mean_dice"] == "0.6"


def test_ablation_rerun_is_bit_identical(tiny):
    first = run_ablation(tiny, with_baselines=True)
    outputs = [
        tiny.path("ablation.csv"),
        tiny.path("full", "segmenter.json"),
        tiny.path("full", "teacher.json"),
        tiny.path("no-assistant", "ssl_log.csv"),
    ]
    hashes = [file_hash(path) for path in outputs]
    second = run_ablation(tiny, with_baselines=True)
    assert [file_hash(path) for path in outputs] == hashes
    assert [r["variant"] for r in second] == [
        name for name, _ in ABLATION_VARIANTS
    ] + ["no-assistant", "assistant-only"]
    assert [r["mean_dice"] for r in first] == [r["mean_dice"] for r in second]


@pytest.mark.skipif(not slow_tests_enabled(), reason="slow tests disabled")
def test_assistant_improves_low_label_training(tmp_path):
    gains, full_not_worst = [], []
    for seed in (1, 2, 3):
        config = load_config(
            None,
            {
                "seed": seed,
                "data": str(tmp_path / f"data{seed}"),
                "out": str(tmp_path / f"out{seed}"),
            },
        )
        rows = {r["variant"]: r for r in run_ablation(config, True)}
        pretrained = read_report_csv(config.path("full", "pretrain_eval.csv"))
        assert pretrained.mean_dice >= 0.70, seed
        gains.append(
            rows["full"]["mean_dice"] - rows["no-assistant"]["mean_dice"]
        )
        grid = [rows[name] for name, _ in ABLATION_VARIANTS]
        full_not_worst.append(worst_variant(grid) != "full")
    assert sum(gain >= 0.02 for gain in gains) >= 2, gains
    assert sum(full_not_worst) >= 2
