import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from mumc import corpus, objectives, tokenizer
from mumc.config import default_config
from mumc.contrastive import MomentumBank
from mumc.model import MumcModel
from mumc.objectives import (
    LossBundle,
    answers_to_ids,
    finetune_answer_loss,
    itm_loss,
    mlm_loss,
    pretrain_step_loss,
    sample_itm_negatives,
    stack_masked,
)
from mumc.tokenizer import CLS_ID, PAD_ID, SEP_ID
from mumc.trainer import backward, build_run_vocab


@pytest.fixture(scope="module")
def desk_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cap, vqa = corpus.synthesize_corpus(seed=3, n_pairs=8, image_size=64, out_dir=root)
    cfg = default_config("desk", "pretrain")
    examples = corpus.load_manifest(cap, "caption")
    vqa_ex = corpus.load_manifest(vqa, "vqa")
    vocab = build_run_vocab(cfg, examples, [f"{e.question} {e.answer}" for e in vqa_ex])
    cfg.model.vocab_size = len(vocab)
    model = MumcModel(cfg.model, seed=0, dtype=torch.float64)
    bank = MomentumBank(model.tower, cfg.contrastive.queue)
    return cfg, model, bank, vocab, examples, vqa_ex


class _FixedLogits(nn.Module):
    def __init__(self, pos_logits, neg_logits, n_pos):
        super().__init__()
        self.table = torch.cat(
            [pos_logits.expand(n_pos, -1), neg_logits.expand(n_pos, -1)]
        )

    def forward(self, x):
        return self.table.to(x.dtype)


class TestItmLoss:
    def test_zero_head_is_ln2(self):
        head = nn.Linear(16, 2)
        with torch.no_grad():
            head.weight.zero_()
            head.bias.zero_()
        head = head.double()
        x = torch.randn(4, 16, dtype=torch.float64)
        loss = itm_loss(x, x, head)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_saturated_head_near_zero(self):
        head = _FixedLogits(torch.tensor([10.0, -10.0]), torch.tensor([-10.0, 10.0]), 3)
        # labels: positives are class 1, so flip the table sign layout
        head.table = torch.cat(
            [torch.tensor([[-10.0, 10.0]]).expand(3, -1), torch.tensor([[10.0, -10.0]]).expand(3, -1)]
        )
        loss = itm_loss(torch.zeros(3, 4), torch.zeros(3, 4), head)
        assert loss.item() == pytest.approx(0.0, abs=1e-8)

    def test_batch_of_one_errors(self):
        head = nn.Linear(4, 2)
        with pytest.raises(ValueError, match="at least 2"):
            itm_loss(torch.zeros(1, 4), torch.zeros(1, 4), head)

    def test_negative_indices_never_self(self):
        rng = np.random.default_rng(0)
        for b in range(2, 9):
            for _ in range(200):
                neg = sample_itm_negatives(b, rng)
                assert not np.any(neg == np.arange(b))
                assert neg.min() >= 0 and neg.max() < b

    def test_random_init_accuracy_near_half(self, desk_setup):
        """Untrained head on 1000 balanced fused pairs classifies at chance level."""
        cfg, model, _, _, _, _ = desk_setup
        g = torch.Generator().manual_seed(1)
        cls = torch.randn(2000, cfg.model.hidden, generator=g, dtype=torch.float64)
        with torch.no_grad():
            logits = model.itm_head(cls)
        labels = torch.cat(
            [torch.ones(1000, dtype=torch.long), torch.zeros(1000, dtype=torch.long)]
        )
        acc = (logits.argmax(dim=1) == labels).double().mean().item()
        assert abs(acc - 0.5) < 0.1


class TestMlmLoss:
    def _image_out(self, model, seed=0):
        g = torch.Generator().manual_seed(seed)
        n = model.grid[0] * model.grid[1]
        patches = torch.randn(2, n, model.cfg.patch_dim, generator=g, dtype=torch.float64)
        kept = objectives.full_kept(2, n)
        return model.encode_image(model.tower.embed_patches(patches, kept))

    def _masked_batch(self, vocab, cfg):
        seqs = [
            tokenizer.encode("a red circle in the upper left", vocab, cfg.model.max_text_len),
            tokenizer.encode("a blue square in the lower right", vocab, cfg.model.max_text_len),
        ]
        rng = np.random.default_rng(0)
        return stack_masked([tokenizer.apply_mlm_mask(s, rng, 0.3) for s in seqs])

    def test_uniform_logits_equal_ln_v(self, desk_setup):
        cfg, model, _, vocab, _, _ = desk_setup
        ids, pad, flags, orig = self._masked_batch(vocab, cfg)
        with torch.no_grad():
            saved = (model.mlm_head.weight.clone(), model.mlm_head.bias.clone())
            model.mlm_head.weight.zero_()
            model.mlm_head.bias.zero_()
        try:
            loss = mlm_loss(model, ids, pad, flags, orig, self._image_out(model))
            assert loss.item() == pytest.approx(math.log(len(vocab)), abs=1e-9)
        finally:
            with torch.no_grad():
                model.mlm_head.weight.copy_(saved[0])
                model.mlm_head.bias.copy_(saved[1])

    def test_matches_hand_computed_ce(self, desk_setup):
        """Numpy log-softmax oracle over the logits captured from the head."""
        cfg, model, _, vocab, _, _ = desk_setup
        ids, pad, flags, orig = self._masked_batch(vocab, cfg)
        captured = {}
        hook = model.mlm_head.register_forward_hook(
            lambda m, i, o: captured.setdefault("logits", o.detach())
        )
        try:
            loss = mlm_loss(model, ids, pad, flags, orig, self._image_out(model))
        finally:
            hook.remove()
        logits = captured["logits"].numpy()
        mask = flags.numpy()
        targets = orig.numpy()
        ces = []
        for b, l in zip(*np.nonzero(mask)):
            row = logits[b, l]
            ces.append(np.log(np.exp(row - row.max()).sum()) + row.max() - row[targets[b, l]])
        assert loss.item() == pytest.approx(float(np.mean(ces)), abs=1e-6)

    def test_independent_of_unmasked_targets(self, desk_setup):
        cfg, model, _, vocab, _, _ = desk_setup
        ids, pad, flags, orig = self._masked_batch(vocab, cfg)
        image_out = self._image_out(model)
        loss_a = mlm_loss(model, ids, pad, flags, orig, image_out)
        orig2 = orig.clone()
        orig2[~flags] = 9  # garbage targets off the mask
        loss_b = mlm_loss(model, ids, pad, flags, orig2, image_out)
        assert loss_a.item() == loss_b.item()

    def test_zero_mask_positions_error(self, desk_setup):
        cfg, model, _, vocab, _, _ = desk_setup
        ids, pad, flags, orig = self._masked_batch(vocab, cfg)
        with pytest.raises(ValueError, match="no masked positions"):
            mlm_loss(model, ids, pad, torch.zeros_like(flags), orig, self._image_out(model))


class TestFinetuneLoss:
    def test_uniform_logits_equal_ln_v(self, desk_setup):
        cfg, model, _, vocab, _, vqa_ex = desk_setup
        with torch.no_grad():
            saved = (model.dec_head.weight.clone(), model.dec_head.bias.clone())
            model.dec_head.weight.zero_()
            model.dec_head.bias.zero_()
        try:
            seqs = [tokenizer.encode(vqa_ex[0].question, vocab, cfg.model.max_text_len)]
            q_ids, q_pad = objectives.stack_sequences(seqs * 2)
            g = torch.Generator().manual_seed(0)
            n = model.grid[0] * model.grid[1]
            patches = torch.randn(2, n, model.cfg.patch_dim, generator=g, dtype=torch.float64)
            a_ids = answers_to_ids(["yes", "no"], vocab)
            loss = finetune_answer_loss(model, q_ids, q_pad, patches, a_ids)
            assert loss.item() == pytest.approx(math.log(len(vocab)), abs=1e-9)
        finally:
            with torch.no_grad():
                model.dec_head.weight.copy_(saved[0])
                model.dec_head.bias.copy_(saved[1])

    def test_single_token_answer_counts_two_terms(self, desk_setup):
        """Average over exactly (answer token, [SEP]) for a one-token answer."""
        cfg, model, _, vocab, _, vqa_ex = desk_setup
        seqs = [tokenizer.encode("is there a circle?", vocab, cfg.model.max_text_len)]
        q_ids, q_pad = objectives.stack_sequences(seqs)
        g = torch.Generator().manual_seed(0)
        n = model.grid[0] * model.grid[1]
        patches = torch.randn(1, n, model.cfg.patch_dim, generator=g, dtype=torch.float64)
        a_ids = answers_to_ids(["yes"], vocab)
        assert a_ids.shape == (1, 3)  # [CLS] yes [SEP]

        captured = {}
        hook = model.dec_head.register_forward_hook(
            lambda m, i, o: captured.setdefault("logits", o.detach())
        )
        try:
            loss = finetune_answer_loss(model, q_ids, q_pad, patches, a_ids)
        finally:
            hook.remove()
        logits = captured["logits"][0]  # (2, V): predictions after [CLS], after "yes"
        targets = a_ids[0, 1:]
        expected = F.cross_entropy(logits, targets)
        assert logits.shape[0] == 2
        assert loss.item() == pytest.approx(expected.item(), abs=1e-12)

    def test_empty_answer_errors(self, desk_setup):
        cfg, model, _, vocab, _, _ = desk_setup
        with pytest.raises(ValueError, match="empty answer"):
            answers_to_ids([" "], vocab)


class TestAnswersToIds:
    def test_layout(self, desk_setup):
        _, _, _, vocab, _, _ = desk_setup
        ids = answers_to_ids(["yes", "upper left"], vocab)
        assert ids[0, 0] == CLS_ID
        assert SEP_ID in ids[0]
        # shorter row is PAD-extended
        row0 = ids[0].tolist()
        assert row0[3:] == [PAD_ID] * (len(row0) - 3)


class TestPretrainStep:
    def test_weighted_total_is_exact_sum(self):
        parts = [torch.tensor(v, dtype=torch.float64) for v in (0.2, 0.3, 0.1, 0.4)]
        bundle = LossBundle(*parts, weights=(1.0, 1.0, 1.0, 1.0))
        assert bundle.total.item() == pytest.approx(1.0, abs=1e-12)
        bundle = LossBundle(*parts, weights=(0.0, 0.0, 0.0, 1.0))
        assert bundle.total.item() == pytest.approx(0.4, abs=1e-12)

    def test_all_components_positive_at_init(self, desk_setup):
        cfg, model, bank, vocab, examples, _ = desk_setup
        out = pretrain_step_loss(model, bank, examples, vocab, cfg, np.random.default_rng(0))
        floats = out.bundle.as_floats()
        for key in ("l_ucl", "l_mcl", "l_itm", "l_mlm"):
            assert floats[key] > 0

    def test_deterministic_given_rng(self, desk_setup):
        cfg, model, bank, vocab, examples, _ = desk_setup
        a = pretrain_step_loss(model, bank, examples, vocab, cfg, np.random.default_rng(5))
        b = pretrain_step_loss(model, bank, examples, vocab, cfg, np.random.default_rng(5))
        assert a.bundle.total.item() == b.bundle.total.item()

    def test_batch_of_one_errors(self, desk_setup):
        cfg, model, bank, vocab, examples, _ = desk_setup
        with pytest.raises(ValueError, match="at least 2"):
            pretrain_step_loss(model, bank, examples[:1], vocab, cfg, np.random.default_rng(0))

    def test_weight_doubling_doubles_contribution_and_gradients(self, desk_setup):
        cfg, model, bank, vocab, examples, _ = desk_setup
        params = dict(model.named_parameters())

        def grads_for(weights):
            import copy

            cfg2 = copy.deepcopy(cfg)
            cfg2.losses = weights
            out = pretrain_step_loss(
                model, bank, examples[:4], vocab, cfg2, np.random.default_rng(11)
            )
            return out.bundle, backward(out.bundle.total, params)

        b1, g1 = grads_for((0.0, 0.0, 0.0, 1.0))
        b2, g2 = grads_for((0.0, 0.0, 0.0, 2.0))
        assert b2.total.item() == pytest.approx(2 * b1.total.item(), rel=1e-12)
        for name in g1:
            assert torch.allclose(g2[name], 2 * g1[name], atol=1e-10)

    def test_mlm_only_weights_match_standalone_mlm_gradients(self, desk_setup):
        """weights (0,0,0,1): step gradients equal the bare MLM loss gradients,
        so an MLM-only pre-training run is step-for-step the ablation run."""
        cfg, model, bank, vocab, examples, _ = desk_setup
        import copy

        cfg2 = copy.deepcopy(cfg)
        cfg2.losses = (0.0, 0.0, 0.0, 1.0)
        params = dict(model.named_parameters())
        out = pretrain_step_loss(model, bank, examples[:4], vocab, cfg2, np.random.default_rng(2))
        g_total = backward(out.bundle.total, params, retain_graph=True)
        g_mlm = backward(out.bundle.mlm, params)
        for name in params:
            assert torch.allclose(g_total[name], g_mlm[name], atol=1e-12)
