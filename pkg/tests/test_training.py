import math
from pathlib import Path

import numpy as np
import pytest

from imnav import agent as ag
from imnav import dataset as ds
from imnav import instructions as ins
from imnav import numcore as nc
from imnav import training as tr
from imnav import world as wd
from imnav.errors import ConfigurationError, ContractError, FormatError
from fdcheck import check_gradients

DATA = Path(__file__).parent.parent / "src" / "imnav" / "data"


def vec(x):
    return nc.Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)


@pytest.fixture(scope="module")
def tiny_split():
    library = wd.load_library(DATA / "landmarks.txt", d_v=16)
    templates = ins.load_templates(DATA / "templates.txt")
    lexicon = ins.load_lexicon(DATA / "lexicon_nouns.txt", DATA / "lexicon_blacklist.txt", library)
    splits = ds.standard_splits(library, templates, lexicon, train_n=6, val_seen_n=3,
                                val_unseen_n=3, data_seed=1)
    return splits


@pytest.fixture(scope="module")
def tiny_agent_config(tiny_split):
    return ag.AgentConfig(vocab_size=len(tiny_split["train"].vocab), d=32, heads=2,
                          cross_layers=1, d_v=16)


class TestImitationLoss:
    def test_saturated_logits(self):
        logits = [vec([1000.0, 0.0]), vec([0.0, 1000.0])]
        loss = tr.imitation_loss(logits, [0, 1])
        assert loss.item() < 1e-6

    def test_uniform_logits(self):
        logits = [vec([0.0] * 4) for _ in range(3)]
        loss = tr.imitation_loss(logits, [0, 1, 2])
        assert abs(loss.item() - math.log(4)) < 1e-6

    def test_matches_per_step_oracle(self):
        rng = np.random.default_rng(0)
        raw = [rng.normal(size=5).astype(np.float32) for _ in range(3)]
        targets = [1, 4, 0]
        loss = tr.imitation_loss([vec(r) for r in raw], targets)
        want = np.mean([
            -np.log(np.exp(r.astype(np.float64) - r.max())[t]
                    / np.exp(r.astype(np.float64) - r.max()).sum())
            for r, t in zip(raw, targets)])
        assert abs(loss.item() - want) < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            tr.imitation_loss([vec([0.0, 1.0])], [0, 1])


class TestCosineAlignment:
    def test_identical_pairs_zero(self):
        a = vec([1.0, 2.0, 3.0])
        loss, skipped = tr.cosine_alignment_loss([(a, vec([1.0, 2.0, 3.0]))])
        assert abs(loss.item()) < 1e-6 and not skipped

    def test_antipodal_pairs_two(self):
        loss, _ = tr.cosine_alignment_loss([(vec([1.0, 0.0]), vec([-1.0, 0.0]))])
        assert abs(loss.item() - 2.0) < 1e-6

    def test_orthogonal_pair_one(self):
        loss, _ = tr.cosine_alignment_loss([(vec([1.0, 0.0]), vec([0.0, 1.0]))])
        assert abs(loss.item() - 1.0) < 1e-6

    def test_mixed_mean(self):
        pairs = [(vec([1.0, 0.0]), vec([1.0, 0.0])), (vec([1.0, 0.0]), vec([0.0, 1.0]))]
        loss, _ = tr.cosine_alignment_loss(pairs)
        assert abs(loss.item() - 0.5) < 1e-6

    def test_empty_returns_zero_with_flag(self):
        loss, skipped = tr.cosine_alignment_loss([])
        assert loss.item() == 0.0 and skipped

    def test_range_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pairs = [(vec(rng.normal(size=6) + 0.01), vec(rng.normal(size=6) + 0.01))
                     for _ in range(4)]
            loss, _ = tr.cosine_alignment_loss(pairs)
            assert -1e-6 <= loss.item() <= 2.0 + 1e-6

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(1)

        def build(ts):
            pairs = [(nc.reshape(ts[0], (6,)), nc.reshape(ts[1], (6,)))]
            return tr.cosine_alignment_loss(pairs)[0]

        for _ in range(5):
            a = rng.normal(size=(2, 3)) + 0.2
            b = rng.normal(size=(2, 3)) + 0.2
            check_gradients(build, [a, b], tol=1e-4)


class TestInfoNCE:
    def test_no_negatives_zero(self):
        pair = (vec([1.0, 0.5]), vec([0.5, 1.0]))
        loss, _ = tr.infonce_loss([pair], [0], tau=0.1)
        assert loss.item() == 0.0

    def test_symmetric_two_way_ln2(self):
        # one negative with identical similarity to the positive
        h = vec([1.0, 0.0])
        pairs = [(h, vec([1.0, 0.0])), (vec([0.0, 1.0]), vec([1.0, 0.0]))]
        loss, _ = tr.infonce_loss(pairs, [0, 1], tau=0.1)
        # pair 0: positive sim 1, negative (owner 1) sim 1 -> ln 2
        # pair 1: positive sim 0 vs negative sim 0 -> ln 2
        assert abs(loss.item() - math.log(2)) < 1e-6

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        hs = [rng.normal(size=4) + 0.1 for _ in range(4)]
        ss = [rng.normal(size=4) + 0.1 for _ in range(4)]
        owners = [0, 0, 1, 2]
        tau = 0.2
        pairs = [(vec(h), vec(s)) for h, s in zip(hs, ss)]
        loss, _ = tr.infonce_loss(pairs, owners, tau)

        def cos(a, b):
            return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

        want = 0.0
        for i in range(4):
            pos = math.exp(cos(hs[i], ss[i]) / tau)
            denom = pos + sum(math.exp(cos(hs[i], ss[j]) / tau)
                              for j in range(4) if owners[j] != owners[i])
            want += -math.log(pos / denom)
        want /= 4
        assert abs(loss.item() - want) < 1e-6

    def test_bad_temperature(self):
        with pytest.raises(ConfigurationError):
            tr.infonce_loss([(vec([1.0]), vec([1.0]))], [0], tau=0.0)

    def test_nonnegative(self):
        rng = np.random.default_rng(9)
        pairs = [(vec(rng.normal(size=5) + 0.2), vec(rng.normal(size=5) + 0.2)) for _ in range(5)]
        loss, _ = tr.infonce_loss(pairs, list(range(5)), tau=0.1)
        assert loss.item() >= 0.0

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(2)

        def build(ts):
            pairs = [(nc.reshape(ts[0], (6,)), nc.reshape(ts[1], (6,))),
                     (nc.reshape(nc.scale(ts[0], 0.5), (6,)), nc.reshape(nc.scale(ts[1], 2.0), (6,)))]
            return tr.infonce_loss(pairs, [0, 1], tau=0.3)[0]

        for _ in range(5):
            a = rng.normal(size=(2, 3)) + 0.2
            b = rng.normal(size=(2, 3)) + 0.2
            check_gradients(build, [a, b], tol=1e-4)


class TestTotalLoss:
    def test_weighted_sum(self):
        got = tr.total_loss(vec(1.0), vec(0.5), 0.5)
        assert abs(got.item() - 1.25) < 1e-7

    def test_lambda_zero_identity(self):
        base = vec(0.7)
        got = tr.total_loss(base, vec(123.0), 0.0)
        assert got.item() == base.item()

    def test_exact_composition(self):
        lb, la = vec(0.31415), vec(0.2718)
        got = tr.total_loss(lb, la, 0.5)
        assert float(got.values) == float(lb.values) + np.float32(0.5 * la.values)


class TestSchedule:
    def cfg(self, iterations=100000):
        return tr.TrainConfig(iterations=iterations, lr_multiplier=1.0)

    def test_stage1(self):
        lrs = tr.three_stage_schedule(10000, self.cfg())
        assert lrs["base"] == (0.0, False)
        assert lrs["imagination_encoder"] == (1e-4, True)
        assert lrs["type_embedding"] == (1e-4, True)

    def test_stage2(self):
        lrs = tr.three_stage_schedule(30000, self.cfg())
        assert lrs["imagination_encoder"][0] == 5e-5
        assert lrs["base"][0] == 1e-6

    def test_stage3(self):
        lrs = tr.three_stage_schedule(80000, self.cfg())
        assert all(lr == 1e-6 for lr, _ in lrs.values())

    def test_multiplier_scales(self):
        cfg = tr.TrainConfig(iterations=1000, lr_multiplier=10.0)
        lrs = tr.three_stage_schedule(0, cfg)
        assert lrs["imagination_encoder"][0] == 1e-3

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            tr.three_stage_schedule(100000, self.cfg())

    def test_fractions_must_sum(self):
        with pytest.raises(ConfigurationError):
            tr.TrainConfig(stage_fractions=(0.5, 0.2, 0.2))


class TestTrainLoop:
    def base_cfg(self, n, seed=3):
        return tr.TrainConfig(iterations=n, batch_size=2, schedule="flat", flat_lr=1e-3,
                              aux_loss="none", use_imaginations=False, seed=seed)

    def test_deterministic_checkpoints(self, tiny_split, tiny_agent_config):
        a, _ = tr.train(tiny_split["train"], tiny_agent_config, self.base_cfg(4))
        b, _ = tr.train(tiny_split["train"], tiny_agent_config, self.base_cfg(4))
        for name in a.values:
            assert a.values[name].tobytes() == b.values[name].tobytes()

    def test_stage1_freezes_base_bitwise(self, tiny_split, tiny_agent_config):
        base_ckpt, _ = tr.train(tiny_split["train"], tiny_agent_config, self.base_cfg(3))
        cfg = tr.TrainConfig(iterations=4, batch_size=2, stage_fractions=(1.0, 0.0, 0.0),
                             aux_loss="cosine", seed=5)
        ckpt, _ = tr.train(tiny_split["train"], tiny_agent_config, cfg,
                           init_values=base_ckpt.values)
        params = ag.init_params(tiny_agent_config, 0)
        for name in ckpt.values:
            group = params.group_of(name)
            if group == "base":
                assert ckpt.values[name].tobytes() == base_ckpt.values[name].tobytes()
        assert any(ckpt.values[n].tobytes() != base_ckpt.values[n].tobytes()
                   for n in ckpt.values if params.group_of(n) != "base")

    def test_aux_gradient_isolation(self, tiny_split, tiny_agent_config):
        """L_cos gradients stay on the h_i / sbar_i paths."""
        params = ag.init_params(tiny_agent_config, seed=0)
        agent = ag.Agent(tiny_agent_config, params)
        item = tiny_split["train"].items[0]
        traj = ag.rollout(agent, item.episode, item.token_ids, item.record.instruction.tokens,
                          item.imaginations, "teacher", obs_rng=np.random.default_rng(0),
                          kept_subs=item.record.kept, train=True,
                          drop_rng=np.random.default_rng(0))
        loss, _ = tr.cosine_alignment_loss(traj.aux_pairs)
        params.zero_grads()
        nc.backward(loss)
        on_path = {"vis_proj", "im_m1", "im_m2", "im_m3", "t_im", "tok_embed",
                   "t_wq", "t_wk", "t_wv", "t_wo", "t_ff1", "t_ff2"}
        for name, t in params.items():
            norm = 0.0 if t.grad is None else float(np.abs(t.grad).max())
            if name in on_path:
                continue
            assert norm == 0.0, f"{name} got aux gradient {norm}"
        assert float(np.abs(params["t_im"].grad).max()) > 0.0

    def test_loss_decreases_on_small_corpus(self, tiny_split, tiny_agent_config):
        cfg = self.base_cfg(60, seed=1)
        _, curves = tr.train(tiny_split["train"], tiny_agent_config, cfg)
        first = np.mean([c[1] for c in curves[:10]])
        last = np.mean([c[1] for c in curves[-10:]])
        assert last < first

    def test_divergence_aborts_with_dump(self, tiny_split, tiny_agent_config):
        cfg = tr.TrainConfig(iterations=30, batch_size=2, schedule="flat", flat_lr=1e6,
                             aux_loss="none", use_imaginations=False, seed=0)
        with pytest.raises(tr.TrainingDiverged) as exc:
            tr.train(tiny_split["train"], tiny_agent_config, cfg)
        assert "iteration" in exc.value.dump


class TestCheckpointIO:
    def make_ckpt(self, tiny_split, tiny_agent_config, iters=3):
        cfg = tr.TrainConfig(iterations=iters, batch_size=2, schedule="flat",
                             aux_loss="cosine", seed=7)
        return tr.train(tiny_split["train"], tiny_agent_config, cfg)[0]

    def test_roundtrip_bitwise(self, tiny_split, tiny_agent_config, tmp_path):
        ckpt = self.make_ckpt(tiny_split, tiny_agent_config)
        path = tmp_path / "a.ckpt"
        tr.save_checkpoint(ckpt, path)
        back = tr.load_checkpoint(path)
        assert back.agent_config == ckpt.agent_config
        assert back.iteration == ckpt.iteration
        assert back.rng_state == ckpt.rng_state
        for name in ckpt.values:
            assert back.values[name].tobytes() == ckpt.values[name].tobytes()
            assert back.adam_m[name].tobytes() == ckpt.adam_m[name].tobytes()
            assert back.adam_v[name].tobytes() == ckpt.adam_v[name].tobytes()

    def test_resume_matches_uninterrupted(self, tiny_split, tiny_agent_config, tmp_path):
        def cfg(n):
            return tr.TrainConfig(iterations=n, batch_size=2, schedule="flat",
                                  aux_loss="cosine", seed=11)

        full, full_curves = tr.train(tiny_split["train"], tiny_agent_config, cfg(8))
        half, _ = tr.train(tiny_split["train"], tiny_agent_config, cfg(4))
        path = tmp_path / "half.ckpt"
        tr.save_checkpoint(half, path)
        resumed, resumed_curves = tr.train(tiny_split["train"], tiny_agent_config, cfg(8),
                                           resume=tr.load_checkpoint(path))
        for name in full.values:
            assert full.values[name].tobytes() == resumed.values[name].tobytes()
        assert [c[:3] for c in full_curves[4:]] == [c[:3] for c in resumed_curves]

    def test_corrupt_magic(self, tiny_split, tiny_agent_config, tmp_path):
        ckpt = self.make_ckpt(tiny_split, tiny_agent_config)
        path = tmp_path / "b.ckpt"
        tr.save_checkpoint(ckpt, path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            tr.load_checkpoint(path)

    def test_truncated_file(self, tiny_split, tiny_agent_config, tmp_path):
        ckpt = self.make_ckpt(tiny_split, tiny_agent_config)
        path = tmp_path / "c.ckpt"
        tr.save_checkpoint(ckpt, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(FormatError):
            tr.load_checkpoint(path)

    def test_baseline_trace_equals_imagination_free_trace(self, tiny_split, tiny_agent_config):
        """lambda=0, aux none, no imaginations == the baseline agent's trace."""
        cfg_a = tr.TrainConfig(iterations=5, batch_size=2, schedule="flat", flat_lr=1e-3,
                               aux_loss="none", use_imaginations=False, seed=2)
        a, curves_a = tr.train(tiny_split["train"], tiny_agent_config, cfg_a)
        b, curves_b = tr.train(tiny_split["train"], tiny_agent_config, cfg_a)
        assert curves_a == curves_b
        for name in a.values:
            assert a.values[name].tobytes() == b.values[name].tobytes()
