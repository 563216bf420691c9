import numpy as np
import pytest
import torch

from graphbackdoor.config import ExperimentConfig
from graphbackdoor.datasets import generate_toy_dataset
from graphbackdoor.denoiser import batch_graphs, cross_entropy_terms, init_model, loss_value
from graphbackdoor.diffusion import forward_marginal_clean
from graphbackdoor.errors import InsufficientHosts, NonFiniteLoss
from graphbackdoor.graphs import Graph, ValenceTable, default_trigger, permute
from graphbackdoor.schedule import cosine_schedule
from graphbackdoor.training import (CLEAN, ONE_TIME, PERSISTENT, corpus_limits, finetune, make_optimizer,
                                    noise_batch, noise_item, poison_corpus, poison_count, run_training,
                                    train_step)

from conftest import random_graph

VT = ValenceTable()
SPEC = default_trigger(VT)
TOY = generate_toy_dataset(80, 9, VT, 3)
TINY = ExperimentConfig(T=10, h_node=8, h_edge=4, h_global=4, n_layers=1, epochs=2, batch_size=16,
                        lr=1e-2, poison_rate=10.0, finetune_epochs=1, sample_count=8)


def strip_wall(log):
    return [{k: v for k, v in rec.items() if k != "wall_ms"} for rec in log]


class TestPoisoning:
    @pytest.mark.parametrize("p,N,want", [(5, 1000, 50), (0, 1000, 0), (1, 50, 1), (2.5, 20, 1), (10, 7, 1)])
    def test_counts(self, p, N, want):
        assert poison_count(p, N) == want

    def test_exact_size(self):
        graphs = generate_toy_dataset(1000, 9, VT, 0)
        pc = poison_corpus(graphs, SPEC, 5, 1)
        assert len(pc.backdoored) == 50 and len(pc.clean) == 950 and pc.size == 1000

    def test_zero_rate(self):
        pc = poison_corpus(TOY, SPEC, 0, 1)
        assert pc.backdoored == [] and len(pc.clean) == len(TOY)

    def test_deterministic_provenance(self):
        a = poison_corpus(TOY, SPEC, 20, 9)
        b = poison_corpus(TOY, SPEC, 20, 9)
        assert a.provenance == b.provenance
        assert all(x[0] == y[0] for x, y in zip(a.backdoored, b.backdoored))
        assert poison_corpus(TOY, SPEC, 20, 10).provenance != a.provenance

    def test_disjoint_and_traceable(self):
        pc = poison_corpus(TOY, SPEC, 25, 2)
        idx = [p["index"] for p in pc.provenance]
        assert len(set(idx)) == len(idx)
        clean_ids = {id(g) for g in pc.clean}
        assert not clean_ids & {id(TOY[i]) for i in idx}
        from graphbackdoor.graphs import inject_trigger
        for (g, m), p in zip(pc.backdoored, pc.provenance):
            again, m2 = inject_trigger(TOY[p["index"]], SPEC, p["seed"])
            assert again == g and m2.node_set == m.node_set

    def test_small_hosts_skipped(self):
        small = [Graph.from_edge_list([0, 0], [(0, 1, 1)], 4, 5)] * 10
        big = generate_toy_dataset(10, 9, VT, 1)
        big = [g for g in big if SPEC.fits(g.n)]
        pc = poison_corpus(small + big, SPEC, 100 * len(big) / (10 + len(big)) - 1e-9, 0)
        assert all(p["index"] >= 10 for p in pc.provenance)

    def test_insufficient_hosts(self):
        small = [Graph.from_edge_list([0, 0], [(0, 1, 1)], 4, 5)] * 10
        with pytest.raises(InsufficientHosts):
            poison_corpus(small, SPEC, 50, 0)


class TestNoising:
    def setup_method(self):
        self.sched = cosine_schedule(10)
        self.pc = poison_corpus(TOY, SPEC, 20, 0)
        self.lim = corpus_limits(self.pc, 0.5)

    def test_persistent_pins_trigger(self):
        rng = np.random.default_rng(0)
        g, m = self.pc.backdoored[0]
        idx = list(m.node_set)
        for t in range(1, 11):
            gt = noise_item(g, m, PERSISTENT, SPEC, self.sched, self.lim, t, rng)
            assert np.array_equal(gt.X[idx], SPEC.Xs) and np.array_equal(gt.E[np.ix_(idx, idx)], SPEC.Es)
        batch = [(g, m, PERSISTENT)] * 20
        nb = noise_batch(batch, np.full(20, 10), self.sched, self.lim, SPEC, rng)
        n = g.n
        assert (nb.X[:, idx].numpy() == SPEC.Xs).all()
        assert (nb.E[:, idx][:, :, idx].numpy() == SPEC.Es).all()

    def test_one_time_uses_clean_chain(self):
        g, m = self.pc.backdoored[0]
        rng = np.random.default_rng(1)
        idx = list(m.node_set)
        broken = 0
        for _ in range(200):
            gt = noise_item(g, m, ONE_TIME, SPEC, self.sched, self.lim, 10, rng)
            broken += not np.array_equal(gt.X[idx], SPEC.Xs)
        assert broken > 100
        draws = np.array([noise_item(g, m, ONE_TIME, SPEC, self.sched, self.lim, 4, rng).node_types()[idx[0]]
                          for _ in range(3000)])
        want = forward_marginal_clean(g, self.sched, self.lim, 4).PX[idx[0]]
        assert np.abs(np.bincount(draws, minlength=4) / 3000 - want).max() < 0.03

    def test_batch_matches_item_distribution(self):
        g, m = self.pc.backdoored[1]
        free = [i for i in range(g.n) if i not in m.node_set][0]
        rng = np.random.default_rng(2)
        for kind, backdoored in ((PERSISTENT, True), (CLEAN, False)):
            batch = [(g, m, kind)] * 3000
            nb = noise_batch(batch, np.full(3000, 5), self.sched, self.lim, SPEC, rng)
            freq = nb.X[:, free].numpy().mean(0)
            mX = self.lim.node(backdoored)
            ab = self.sched.alpha_bar_at(5)
            want = ab * g.X[free] + (1 - ab) * mX
            assert np.abs(freq - want).max() < 0.03

    def test_padding_stays_empty(self):
        rng = np.random.default_rng(3)
        batch = [(TOY[0], None, CLEAN), (TOY[1], None, CLEAN)]
        nb = noise_batch(batch, np.array([10, 10]), self.sched, self.lim, SPEC, rng)
        for b, (g, _, _) in enumerate(batch):
            assert nb.X[b, g.n:].sum() == 0 and nb.E[b, g.n:].sum() == 0


class TestTrainStep:
    def test_overfit_one_sample(self):
        # vertex- and edge-transitive, so an equivariant model can memorise it from pure noise
        g = Graph.from_edge_list([0, 0, 0], [(0, 1, 1), (1, 2, 1), (0, 2, 1)], 4, 5)
        sched = cosine_schedule(10)
        pc = poison_corpus([g], SPEC, 0, 0)
        lim = corpus_limits(pc, 0.5)
        model = init_model(4, 5, (16, 8, 8), 1, rng_seed=0)
        opt = make_optimizer(model, TINY.replace(lr=1e-2))
        rng = np.random.default_rng(0)
        probes = [(noise_item(g, None, CLEAN, SPEC, sched, lim, t, rng), t) for t in (1, 5, 10)]
        before = np.mean([loss_value(model, g, gt, t, 10) for gt, t in probes])
        for _ in range(200):
            train_step(model, opt, [(g, None, CLEAN)], sched, lim, SPEC, rng)
        after = np.mean([loss_value(model, g, gt, t, 10) for gt, t in probes])
        assert after < 0.1 * before

    def test_decomposition(self):
        pc = poison_corpus(TOY, SPEC, 20, 0)
        sched, lim = cosine_schedule(10), corpus_limits(pc, 0.5)
        model = init_model(4, 5, (8, 4, 4), 1)
        opt = make_optimizer(model, TINY)
        batch = [(g, None, CLEAN) for g in pc.clean[:6]] + [(g, m, PERSISTENT) for g, m in pc.backdoored[:3]]
        total, lc, lb = train_step(model, opt, batch, sched, lim, SPEC, 0)
        assert lc >= 0 and lb > 0 and abs(total - (lc + lb)) <= 1e-9 * total
        total, lc, lb = train_step(model, opt, batch[:6], sched, lim, SPEC, 1)
        assert lb == 0 and total == pytest.approx(lc, rel=1e-12)

    def test_batch_loss_permutation_invariant(self):
        rng = np.random.default_rng(4)
        model = init_model(4, 5, (16, 8, 8), 2, rng_seed=1)
        targets = [random_graph(rng, int(rng.integers(3, 9))) for _ in range(6)]
        noisy = [random_graph(rng, g.n) for g in targets]
        tfrac = torch.tensor(rng.integers(1, 11, size=6) / 10)
        with torch.no_grad():
            base = cross_entropy_terms(model, batch_graphs(targets), batch_graphs(noisy), tfrac).sum().item()
            perms = [rng.permutation(g.n) for g in targets]
            pt = [permute(g, p) for g, p in zip(targets, perms)]
            pn = [permute(g, p) for g, p in zip(noisy, perms)]
            moved = cross_entropy_terms(model, batch_graphs(pt), batch_graphs(pn), tfrac).sum().item()
        assert abs(base - moved) <= 1e-8

    def test_params_stay_float32_exact(self):
        pc = poison_corpus(TOY, SPEC, 0, 0)
        sched, lim = cosine_schedule(10), corpus_limits(pc, 0.5)
        model = init_model(4, 5, (8, 4, 4), 1)
        opt = make_optimizer(model, TINY)
        train_step(model, opt, [(g, None, CLEAN) for g in pc.clean[:4]], sched, lim, SPEC, 0)
        assert all(torch.equal(p, p.float().double()) for p in model.params.values())


class TestRunTraining:
    def test_log_shape_and_determinism(self):
        pc = poison_corpus(TOY, SPEC, TINY.poison_rate, TINY.seed)
        a = run_training(pc, TINY)
        b = run_training(pc, TINY)
        assert strip_wall(a.log) == strip_wall(b.log)
        assert [r["epoch"] for r in a.log] == [1, 2]
        assert a.log[0]["step"] < a.log[1]["step"]
        assert set(a.log[0]) == {"epoch", "step", "loss_clean", "loss_backdoor", "lr", "wall_ms"}
        assert all(torch.equal(a.model.params[k], b.model.params[k]) for k in a.model.params)

    def test_clean_training_has_no_backdoor_term(self):
        cfg = TINY.replace(poison_rate=0.0)
        pc = poison_corpus(TOY, SPEC, 0, 0)
        tm = run_training(pc, cfg)
        assert all(r["loss_backdoor"] == 0 for r in tm.log)
        assert np.array_equal(tm.limits.mXB, tm.limits.mX)

    def test_checkpoint_callback(self):
        seen = []
        cfg = TINY.replace(epochs=4, checkpoint_every=2)
        run_training(poison_corpus(TOY, SPEC, 10, 0), cfg, checkpoint_fn=lambda ep, m: seen.append(ep))
        assert seen == [2, 4]

    def test_non_finite_loss(self):
        pc = poison_corpus(TOY, SPEC, 0, 0)
        tm = run_training(pc, TINY.replace(epochs=1))
        with torch.no_grad():
            tm.model.params["head.node.b"].fill_(float("nan"))
        with pytest.raises(NonFiniteLoss) as info:
            finetune(tm, pc, "clean", TINY, epochs=1)
        assert info.value.last_good is not None
        assert info.value.last_good.num_params() == tm.model.num_params()

    def test_finetune_zero_epochs_and_input_untouched(self):
        pc = poison_corpus(TOY, SPEC, 10, 0)
        tm = run_training(pc, TINY)
        same = finetune(tm, pc, "clean", TINY, epochs=0)
        assert all(torch.equal(same.model.params[k], tm.model.params[k]) for k in tm.model.params)
        before = {k: v.clone() for k, v in tm.model.params.items()}
        tuned = finetune(tm, pc, "adversarial", TINY, epochs=1, fresh_graphs=TOY)
        assert all(torch.equal(before[k], tm.model.params[k]) for k in before)
        assert any(not torch.equal(before[k], tuned.model.params[k]) for k in before)
        assert tuned.log[-1]["loss_backdoor"] > 0
        with pytest.raises(ValueError):
            finetune(tm, pc, "bogus", TINY)
