import csv
import json

import numpy as np
import pytest
import torch

from mumc import corpus, evalviz
from mumc.config import default_config
from mumc.corpus import VqaExample
from mumc.evalviz import (
    AttentionMap,
    EvalRecord,
    EvalReport,
    evaluate,
    gradcam,
    quadrant_mass_fraction,
    rank_answer,
    unique_answers,
)
from mumc.model import MumcModel
from mumc.trainer import build_run_vocab


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("evaldata")
    cap, vqa = corpus.synthesize_corpus(seed=21, n_pairs=6, image_size=64, out_dir=root)
    cfg = default_config("desk", "finetune")
    captions = corpus.load_manifest(cap, "caption")
    vqa_ex = corpus.load_manifest(vqa, "vqa")
    vocab = build_run_vocab(cfg, captions, [f"{e.question} {e.answer}" for e in vqa_ex])
    cfg.model.vocab_size = len(vocab)
    model = MumcModel(cfg.model, seed=0)
    model.eval()
    return cfg, model, vocab, vqa_ex


class TestRankAnswer:
    def test_single_candidate(self, setup):
        cfg, model, vocab, vqa_ex = setup
        image = corpus.load_image(vqa_ex[0].image_path)
        best, scores = rank_answer(model, vocab, vqa_ex[0].question, image, ["yes"], cfg)
        assert best == "yes" and scores.shape == (1,)

    def test_duplicate_best_keeps_first(self, setup):
        cfg, model, vocab, vqa_ex = setup
        image = corpus.load_image(vqa_ex[0].image_path)
        base = ["yes", "no", "circle"]
        best, scores = rank_answer(model, vocab, vqa_ex[0].question, image, base, cfg)
        dup = base + [best]
        best2, scores2 = rank_answer(model, vocab, vqa_ex[0].question, image, dup, cfg)
        assert best2 == best
        assert int(np.argmax(scores2)) == int(np.argmax(scores))

    def test_permutation_invariant_winner(self, setup):
        cfg, model, vocab, vqa_ex = setup
        image = corpus.load_image(vqa_ex[0].image_path)
        cands = ["yes", "no", "circle", "upper left"]
        best, scores = rank_answer(model, vocab, vqa_ex[0].question, image, cands, cfg)
        perm = [cands[i] for i in (2, 0, 3, 1)]
        best_p, scores_p = rank_answer(model, vocab, vqa_ex[0].question, image, perm, cfg)
        assert best_p == best
        for i, c in enumerate(perm):
            assert scores_p[i] == pytest.approx(scores[cands.index(c)], abs=1e-5)

    def test_empty_candidates_error(self, setup):
        cfg, model, vocab, vqa_ex = setup
        image = corpus.load_image(vqa_ex[0].image_path)
        with pytest.raises(ValueError, match="empty candidate"):
            rank_answer(model, vocab, vqa_ex[0].question, image, [], cfg)


class TestEvalReport:
    def _records(self):
        return [
            EvalRecord("q1", "yes", "yes", "closed", True),
            EvalRecord("q2", "no", "yes", "closed", False),
            EvalRecord("q3", "upper left", "upper left", "open", True),
            EvalRecord("q4", "circle", "square", "open", False),
        ]

    def test_accuracy_arithmetic(self):
        report = EvalReport(self._records())
        assert report.overall_acc == 50.0
        assert report.open_acc == 50.0
        assert report.closed_acc == 50.0

    def test_all_correct(self):
        records = [EvalRecord("q", "a", "a", "open", True) for _ in range(3)]
        report = EvalReport(records)
        assert report.open_acc == 100.0 and report.overall_acc == 100.0

    def test_absent_group_is_none_not_zero(self):
        records = [EvalRecord("q", "a", "a", "open", True)]
        report = EvalReport(records)
        assert report.closed_acc is None
        assert report.aggregates()["closed"]["accuracy"] is None

    def test_group_decomposition(self):
        report = EvalReport(self._records())
        agg = report.aggregates()
        assert agg["overall"]["correct"] == agg["open"]["correct"] + agg["closed"]["correct"]
        assert agg["overall"]["total"] == agg["open"]["total"] + agg["closed"]["total"]

    def test_write_outputs(self, tmp_path):
        report = EvalReport(self._records())
        report.write(tmp_path)
        data = json.loads((tmp_path / "report.json").read_text())
        assert data["aggregates"]["overall"]["accuracy"] == 50.0
        with open(tmp_path / "report.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["question", "truth", "prediction", "answer_type", "correct"]
        assert len(rows) == 5
        table = (tmp_path / "report.txt").read_text()
        assert "Open" in table and "Closed" in table and "Overall" in table
        assert (tmp_path / "accuracy.png").exists()

    def test_unique_answers_order(self):
        examples = [
            VqaExample("x", "q", "Yes", "closed"),
            VqaExample("x", "q", "no", "closed"),
            VqaExample("x", "q", "yes", "closed"),
        ]
        assert unique_answers(examples) == ["Yes", "no"]


class TestEvaluate:
    def test_report_covers_all_examples(self, setup):
        cfg, model, vocab, vqa_ex = setup
        report = evaluate(model, vocab, vqa_ex[:8], None, cfg, batch=4)
        assert len(report.records) == 8
        for rec in report.records:
            assert rec.answer_type in ("open", "closed")

    def test_generate_mode_runs(self, setup):
        cfg, model, vocab, vqa_ex = setup
        import copy

        cfg2 = copy.deepcopy(cfg)
        cfg2.rank_by = "generate"
        report = evaluate(model, vocab, vqa_ex[:4], None, cfg2, batch=2)
        assert len(report.records) == 4


class TestGradcam:
    def test_shape_and_normalization(self, setup):
        cfg, model, vocab, vqa_ex = setup
        ex = vqa_ex[0]
        image = corpus.load_image(ex.image_path)
        amap = gradcam(model, vocab, ex.question, image, ex.answer, cfg)
        assert amap.grid_map.shape == model.grid
        assert amap.upsampled.shape == (64, 64)
        assert (amap.grid_map >= 0).all()
        if amap.grid_map.max() > 0:
            assert amap.grid_map.max() == pytest.approx(1.0)

    def test_zeroed_cross_attention_values_give_zero_map(self, setup):
        cfg, model, vocab, vqa_ex = setup
        import copy

        frozen = MumcModel(cfg.model, seed=0)
        with torch.no_grad():
            for blk in frozen.mm_encoder.blocks:
                blk.cross_attn.v.weight.zero_()
                blk.cross_attn.v.bias.zero_()
                blk.cross_attn.out.bias.zero_()
        ex = vqa_ex[0]
        image = corpus.load_image(ex.image_path)
        amap = gradcam(frozen, vocab, ex.question, image, ex.answer, cfg)
        assert np.all(amap.grid_map == 0)

    def test_layer_out_of_range(self, setup):
        cfg, model, vocab, vqa_ex = setup
        ex = vqa_ex[0]
        image = corpus.load_image(ex.image_path)
        with pytest.raises(ValueError, match="out of range"):
            gradcam(model, vocab, ex.question, image, ex.answer, cfg, layer=5)

    def test_quadrant_mass_fraction(self):
        up = np.zeros((8, 8), dtype=np.float32)
        up[:4, :4] = 1.0
        amap = AttentionMap(grid_map=up, upsampled=up, layer=-1)
        assert quadrant_mass_fraction(amap, "upper left") == 1.0
        assert quadrant_mass_fraction(amap, "lower right") == 0.0

    def test_overlay_written(self, setup, tmp_path):
        cfg, model, vocab, vqa_ex = setup
        ex = vqa_ex[0]
        image = corpus.load_image(ex.image_path)
        amap = gradcam(model, vocab, ex.question, image, ex.answer, cfg)
        out = tmp_path / "overlay.png"
        evalviz.save_attention_overlay(image, amap, out, title=ex.question)
        assert out.exists() and out.stat().st_size > 0


class TestRetrieval:
    def test_duplicate_captions_count_correct(self, setup, tmp_path):
        """With every caption identical, any retrieval is a string match."""
        cfg, model, vocab, vqa_ex = setup
        root = tmp_path
        cap, _ = corpus.synthesize_corpus(seed=2, n_pairs=4, image_size=64, out_dir=root)
        examples = corpus.load_manifest(cap, "caption")
        for ex in examples:
            ex.caption = "a red circle in the upper left"
        r1 = evalviz.in_batch_retrieval_r1(model, examples, vocab, cfg, batch=4)
        assert r1 == 1.0
