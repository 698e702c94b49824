import math

import numpy as np
import pytest
from conftest import make_image

from coprop.collection import Correspondence, build_parts_graph
from coprop.propagation import (LikelihoodStore, PropagationContext, PropagationParams,
                                PropagationSchedule, commit_segmentation, iteration_step,
                                run_once, run_pipeline)
from coprop.synthetic import SyntheticSpec, generate_synthetic_collection
from oracles import brute_min_energy


def halves(image_id, fg_left=False):
    labels = np.ones((4, 10), np.int64)
    labels[:, 5:] = 2
    mask = None
    if fg_left:
        mask = np.zeros((4, 10), bool)
        mask[:, :5] = True
    return make_image(image_id, labels, template_mask=mask)


def link(a, b):
    rows = np.array([[x, y, x, y, 0.9] for y in range(4) for x in range(10)], float)
    return [Correspondence(a, b, rows), Correspondence(b, a, rows)]


def graph_from(links, names, template="T", extra=()):
    ims = [halves(n, fg_left=(n == template)) for n in names]
    corrs = [c for a, b in links for c in link(a, b)]
    return build_parts_graph(ims + list(extra), corrs, template_id=template)


# store ----------------------------------------------------------------------

def test_store_decay_and_fusion():
    g = graph_from([("T", "A")], ["T", "A"])
    store = LikelihoodStore(g)
    store.add("A", [0.8, 0.8], hop=0, decay=0.5)
    store.add("A", [0.2, 0.2], hop=1, decay=0.5)
    np.testing.assert_allclose(store.likelihood("A"), 0.6, atol=1e-15)
    np.testing.assert_allclose(store.weight("A"), 1.5)
    store.add("A", [0.0, 0.0], hop=2, decay=0.5)
    np.testing.assert_allclose(store.weight("A"), 1.75)
    assert store.hops["A"] == [0, 1, 2]


def test_template_is_pinned():
    g = graph_from([("T", "A")], ["T", "A"])
    store = LikelihoodStore(g)
    store.add("T", [0.3, 0.3], hop=0, decay=0.5)
    np.testing.assert_array_equal(store.likelihood("T"), [1.0, 0.0])
    assert store.has_estimates("T") and not store.has_estimates("A")
    np.testing.assert_array_equal(store.likelihood("A"), [0.5, 0.5])


def test_store_dump_rows(tmp_path):
    g = graph_from([("T", "A")], ["T", "A"])
    store = LikelihoodStore(g)
    store.add("A", [0.25, 0.75], hop=1, decay=0.5)
    store.dump(tmp_path / "ck.txt")
    rows = [line.split() for line in (tmp_path / "ck.txt").read_text().splitlines()]
    assert rows[0] == ["A", "0", "0.25", "0.5"]
    assert rows[-1] == ["T", "1", "0.0", "1.0"]


# commit ---------------------------------------------------------------------

def test_commit_unanimous_and_tied():
    g = graph_from([("T", "A")], ["T", "A"])
    ctx = PropagationContext(g, PropagationParams(lambda_pairwise=0.5))
    store = LikelihoodStore(g)
    store.add("A", [1.0, 1.0], 0, 0.5)
    assert commit_segmentation(ctx, "A", store).all()
    store = LikelihoodStore(g)
    store.add("A", [0.5, 0.5], 0, 0.5)
    assert not commit_segmentation(ctx, "A", store).any()
    np.testing.assert_array_equal(commit_segmentation(ctx, "T", store), [True, False])


def test_commit_is_minimum_energy_on_grid():
    labels = np.arange(1, 10).reshape(3, 3).repeat(2, axis=0).repeat(2, axis=1)
    rng = np.random.default_rng(0)
    merges = {}
    from coprop.collection import adjacent_pairs
    for a, b in adjacent_pairs(labels).tolist():
        merges[(a, b)] = merges[(b, a)] = float(rng.uniform(0.15, 1))
    im = make_image("A", labels, merges=merges)
    g = build_parts_graph([halves("T", True), im], link("T", "A")[:0], template_id="T")
    params = PropagationParams(lambda_pairwise=0.7)
    ctx = PropagationContext(g, params)
    store = LikelihoodStore(g)
    lik = rng.uniform(0, 1, 9)
    store.add("A", lik, 0, 0.5)
    got = commit_segmentation(ctx, "A", store)
    edges, weights = ctx.intra("A")
    w = params.lambda_pairwise * weights
    best, _ = brute_min_energy(1 - lik, lik, edges, w)
    energy = np.where(got, 1 - lik, lik).sum() + w[got[edges[:, 0]] != got[edges[:, 1]]].sum()
    assert energy == pytest.approx(best, abs=1e-12)


# scheduling -----------------------------------------------------------------

def test_star_center_covers_leaves_in_one_step():
    g = graph_from([("T", n) for n in "ABCD"], ["T", "A", "B", "C", "D"])
    ctx = PropagationContext(g, PropagationParams())
    store = LikelihoodStore(g)
    sched = PropagationSchedule(np.random.default_rng(0), "T")
    report = iteration_step(sched, store, ctx, {"T": g.template_seed().labels})
    assert sorted(report.targets) == list("ABCD") and report.next_seed is None
    assert all(store.hops[n] == [0] for n in "ABCD")


def test_dead_end_falls_back_to_frontier():
    g = graph_from([("T", "A"), ("T", "B"), ("B", "C")], ["T", "A", "B", "C"])
    ctx = PropagationContext(g, PropagationParams())
    store = LikelihoodStore(g)
    labels = {"T": g.template_seed().labels}
    sched = PropagationSchedule(np.random.default_rng(0), "T")
    iteration_step(sched, store, ctx, labels)
    sched.seed = "A"
    labels["A"] = commit_segmentation(ctx, "A", store)
    report = iteration_step(sched, store, ctx, labels)
    assert report.targets == [] and report.next_seed == "B"
    report = iteration_step(sched, store, ctx, labels)
    assert report.targets == ["C"] and store.hops["C"] == [2]


@pytest.mark.parametrize("seed", range(5))
def test_every_reachable_image_is_covered(seed):
    c = generate_synthetic_collection(SyntheticSpec(n_images=6, width=32, height=32,
                                                    topology="chain", template=2), seed)
    store, _ = run_once(c.graph, PropagationParams(runs=1), np.random.default_rng(seed))
    for im in c.graph.images:
        assert store.has_estimates(im.id)
        hops = store.hops[im.id]
        assert hops == sorted(hops)


def test_unreachable_images_get_neutral_output():
    lonely = halves("Z")
    g = graph_from([("T", "A")], ["T", "A"], extra=[lonely])
    res = run_pipeline(g, PropagationParams(runs=2))
    assert res.unreachable == ("Z",)
    np.testing.assert_array_equal(res.likelihoods["Z"], [0.5, 0.5])
    assert not res.masks["Z"].any()


def test_template_only_collection_returns_template():
    g = build_parts_graph([halves("T", True)], [], template_id="T")
    res = run_pipeline(g)
    np.testing.assert_array_equal(res.masks["T"], g.image("T").template_mask)


def test_chain_without_noise_recovers_truth():
    spec = SyntheticSpec(n_images=5, topology="chain", appearance_noise=0.0,
                         low_confidence_rate=0.0)
    c = generate_synthetic_collection(spec, 11)
    res = run_pipeline(c.graph, PropagationParams(runs=2), rng_seed=0)
    for k, mask in res.masks.items():
        np.testing.assert_array_equal(mask, c.truth_masks[k])


def test_pipeline_determinism_and_run_averaging(small_collection):
    g = small_collection.graph
    a = run_pipeline(g, PropagationParams(runs=3), rng_seed=5)
    b = run_pipeline(g, PropagationParams(runs=3), rng_seed=5)
    for k in a.likelihoods:
        np.testing.assert_array_equal(a.likelihoods[k], b.likelihoods[k])
        np.testing.assert_array_equal(a.masks[k], b.masks[k])
    for im in g.images:
        if im.id == g.template_id:
            assert set(np.unique(a.likelihoods[im.id])) <= {0.0, 1.0}
            continue
        runs = [s.likelihood(im.id) for s in a.stores]
        forward = np.array([math.fsum(col) for col in np.stack(runs).T]) / 3
        backward = np.array([math.fsum(col) for col in np.stack(runs[::-1]).T]) / 3
        np.testing.assert_array_equal(a.likelihoods[im.id], forward)
        np.testing.assert_array_equal(forward, backward)


def test_checkpoints_and_traces(tmp_path, small_collection):
    res = run_pipeline(small_collection.graph, PropagationParams(runs=1), trace=True,
                       checkpoint_dir=tmp_path)
    files = sorted(tmp_path.glob("checkpoint_run0_iter*.txt"))
    assert files
    assert len(files[0].read_text().split("\n")[0].split()) == 4
    assert res.traces and all(len(row) == 3 for _, rows in res.traces for row in rows)


def test_param_validation():
    with pytest.raises(ValueError):
        PropagationParams(runs=0)
    with pytest.raises(ValueError):
        PropagationParams(decay=1.0)
