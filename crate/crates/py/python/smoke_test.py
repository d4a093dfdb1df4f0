"""Smoke test for the scoped_learning extension module.

Run after building the extension, e.g. `maturin develop -m crates/py/Cargo.toml`.
"""

import json
import math
import os
import tempfile

import scoped_learning as sl

SPEC = {
    "K": 2,
    "V": 20,
    "F": 5,
    "locale_count": 30,
    "train_locale_count": 30,
    "instances_per_locale": [4, 10],
    "eta_truth": [0.5, 0.5],
    "beta_concentration": 1.0,
    "phi_concentration": 0.3,
    "global_bag_size": 1,
    "local_bag_size": 1,
    "seed": 3,
}


def main():
    assert abs(sl.digamma(1.0) + 0.5772156649015329) < 1e-12
    assert abs(sl.log_gamma(10.0) - math.log(362880.0)) < 1e-10
    assert abs(sl.polya_log_marginal([[2, 0]]) - math.log(1.0 / 3.0)) < 1e-12

    train, test, truth = sl.synthesize(json.dumps(SPEC))
    assert train is not None
    assert test.dims == (2, 20, 5)
    assert len(json.loads(truth)["locales"]) == 60

    nb = sl.GlobalModel.train_naive_bayes(train)
    me = sl.GlobalModel.train_maxent(train)
    assert nb.kind == "naive_bayes" and me.kind == "maxent"
    p = nb.posterior([0])
    assert abs(sum(p) - 1.0) < 1e-12

    scores = {}
    for algo, model in [("global", nb), ("map_em", nb), ("variational", nb), ("cond_em", me)]:
        results = sl.infer(model, test, algo=algo, threads=2)
        assert [r.locale for r in results] == sorted(test.locale_ids)
        scores[algo] = sl.evaluate(test, results)
    for algo, (acc, ap) in scores.items():
        assert 0.0 <= acc <= 1.0 and 0.0 <= ap <= 1.0, algo
        print(f"{algo:12s} accuracy {acc:.3f}  average precision {ap:.3f}")

    marginals, log_evidence = sl.exact_posterior(nb, test, test.locale_ids[0])
    assert all(abs(sum(row) - 1.0) < 1e-9 for row in marginals)
    assert log_evidence < 0.0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        nb.save(path)
        again = sl.GlobalModel.load(path)
        assert again.to_json() == nb.to_json()
        cpath = os.path.join(tmp, "test.jsonl")
        test.save(cpath)
        assert sl.Corpus.load(cpath).instance_count == test.instance_count

    try:
        sl.infer(nb, test, algo="cond_em")
    except ValueError:
        pass
    else:
        raise AssertionError("cond_em with a naive Bayes model should fail")

    print("smoke test passed")


if __name__ == "__main__":
    main()
