"""Acceptance suite; each criterion records one PASS/FAIL line for the summary."""
import math

import numpy as np
import pytest

from conftest import random_unit, record
from probret.data import ingest
from probret.distributions import (Beta, SphericalMarginal, TruncExp, build_cdf_table, cdf,
                                   density, inverse_cdf, quadrature_cdf)
from probret.evaluation import SWEEP_P, cdf_sweep, count_histogram
from probret.losses import (Batch, MleDensityConfig, beta_nce_loss, exp_nce_loss, info_nce_loss,
                            mle_beta_loss, pairwise_softmax_loss, pointwise_loss)
from probret.pipeline import PipelineConfig, run_experiment
from probret.retrieval import CdfCutoff, ItemIndex, ScoreThreshold, TopK, retrieve
from probret.serialization import load_index, load_model

SEEDS = (0, 1, 2)


# ---------------------------------------------------------------- criterion 1

def _loss_fns():
    return {
        "pointwise": (lambda b, x: pointwise_loss(b), False),
        "pointwise_corrected": (lambda b, x: pointwise_loss(b, corrected=True), False),
        "pairwise": (lambda b, x: pairwise_softmax_loss(b, 0.2), False),
        "infonce": (lambda b, x: info_nce_loss(b), True),
        "expnce": (lambda b, x: exp_nce_loss(b), True),
        "betance": (lambda b, x: beta_nce_loss(b), True),
        "mle": (lambda b, x: mle_beta_loss(b, MleDensityConfig(x["alpha_pos"], x["beta_neg"])),
                False),
    }


def _flat(q, p, tau, extra):
    parts = [q.ravel(), p.ravel()]
    if tau is not None:
        parts.append(tau)
    parts.extend(extra[k] for k in sorted(extra))
    return np.concatenate(parts)


def _unflat(v, b, n, with_tau, extra_keys):
    q = v[:b * n].reshape(b, n)
    p = v[b * n:2 * b * n].reshape(b, n)
    pos = 2 * b * n
    tau = None
    if with_tau:
        tau, pos = v[pos:pos + b], pos + b
    extra = {}
    for k in extra_keys:
        extra[k], pos = v[pos:pos + b], pos + b
    return q, p, tau, extra


def test_criterion_1_gradient_checks():
    rng = np.random.default_rng(1)
    h = 1e-5
    worst = {}
    for _ in range(100):
        b, n = int(rng.integers(3, 7)), int(rng.integers(3, 6))
        q, p = random_unit(rng, (b, n)), random_unit(rng, (b, n))
        tau = rng.uniform(0.1, 1.0, b)
        extra = {"alpha_pos": rng.uniform(1.5, 8, b), "beta_neg": rng.uniform(1.5, 8, b)}
        for name, (fn, uses_tau) in _loss_fns().items():
            keys = sorted(extra) if name == "mle" else []
            ex = {k: extra[k] for k in keys}
            t = tau if uses_tau else None
            out = fn(Batch(q, p, t), ex)
            analytic = _flat(out.grad_queries, out.grad_positives,
                             out.grad_tau if uses_tau else None,
                             {k: out.grad_extra[k] for k in keys})
            x0 = _flat(q, p, t, ex)

            def central(j, step):
                xp, xm = x0.copy(), x0.copy()
                xp[j] += step
                xm[j] -= step
                up = fn(Batch(*_unflat(xp, b, n, uses_tau, keys)[:3]),
                        _unflat(xp, b, n, uses_tau, keys)[3]).value
                dn = fn(Batch(*_unflat(xm, b, n, uses_tau, keys)[:3]),
                        _unflat(xm, b, n, uses_tau, keys)[3]).value
                return (up - dn) / (2 * step)

            # Richardson step: scores near +-1 make the plain central difference
            # truncation-limited for the log-density losses
            fd = np.array([(4 * central(j, h / 2) - central(j, h)) / 3 for j in range(x0.size)])
            rel = np.linalg.norm(fd - analytic) / max(np.linalg.norm(fd), np.linalg.norm(analytic),
                                                      1e-12)
            worst[name] = max(worst.get(name, 0.0), rel)
    ok = max(worst.values()) < 1e-4
    record(1, ok, "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items())))
    assert ok, worst


# ---------------------------------------------------------------- criterion 2

PANELS = 10 ** 6


def _riemann_lower(a, b, z):
    """Midpoint sum of u^(a-1) (1-u)^(b-1) over [0, z], z <= 1/2.

    For a < 1 the substitution w = u^a removes the endpoint singularity:
    the integral becomes (1/a) * int_0^{z^a} (1 - w^(1/a))^(b-1) dw.
    """
    if a < 1:
        top = z ** a
        w = (np.arange(PANELS) + 0.5) * (top / PANELS)
        return np.sum((1.0 - w ** (1.0 / a)) ** (b - 1.0)) * (top / PANELS) / a
    u = (np.arange(PANELS) + 0.5) * (z / PANELS)
    return np.sum(u ** (a - 1.0) * (1.0 - u) ** (b - 1.0)) * (z / PANELS)


def _riemann_beta_cdf(a, b, t):
    z = (1.0 + t) / 2.0
    log_b = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    if z <= 0.5:
        return _riemann_lower(a, b, z) / math.exp(log_b)
    return 1.0 - _riemann_lower(b, a, 1.0 - z) / math.exp(log_b)


def test_criterion_2_quadrature_oracle():
    rng = np.random.default_rng(2)
    beta_err = 0.0
    roundtrip = 0.0
    for _ in range(50):
        a, b = rng.uniform(0.5, 20, 2)
        dist = Beta(a, b)
        ts = np.concatenate([[-0.999, 0.999], rng.uniform(-1, 1, 3)])
        got = quadrature_cdf(dist, ts)
        want = np.array([_riemann_beta_cdf(a, b, t) for t in ts])
        beta_err = max(beta_err, float(np.abs(got - want).max()))
        table = build_cdf_table(dist)
        ps = np.linspace(table.grid_values[0], table.grid_values[-1], 2001)
        roundtrip = max(roundtrip, float(np.abs(cdf(dist, inverse_cdf(table, ps)) - ps).max()))

    exp_err = 0.0
    t = np.linspace(-1, 1, 201)
    for tau in np.exp(rng.uniform(np.log(0.02), np.log(2.0), 50)):
        exp_err = max(exp_err, float(np.abs(cdf(TruncExp(tau), t)
                                            - quadrature_cdf(TruncExp(tau), t)).max()))
        table = build_cdf_table(TruncExp(tau))
        ps = np.linspace(table.grid_values[0], 1.0, 501)
        roundtrip = max(roundtrip, float(np.abs(cdf(TruncExp(tau), inverse_cdf(table, ps))
                                                - ps).max()))
    ok = beta_err <= 1e-5 and exp_err <= 1e-8 and roundtrip <= 2e-3
    record(2, ok, f"beta vs oracle {beta_err:.1e}, truncexp closed vs quadrature {exp_err:.1e}, "
                  f"inverse roundtrip {roundtrip:.1e}")
    assert ok


# ---------------------------------------------------------------- criterion 3

def test_criterion_3_identities():
    rng = np.random.default_rng(3)
    exp_info = info_pair = 0.0
    for _ in range(100):
        b, n = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        q, p = random_unit(rng, (b, n)), random_unit(rng, (b, n))
        tau = rng.uniform(0.05, 1.0, b)
        exp_info = max(exp_info, abs(exp_nce_loss(Batch(q, p, tau)).value
                                     - info_nce_loss(Batch(q, p, tau)).value))
        c = float(rng.uniform(0.05, 1.0))
        info_pair = max(info_pair, abs(info_nce_loss(Batch(q, p, np.full(b, c))).value
                                       - pairwise_softmax_loss(Batch(q, p), c).value))
    sph = 0.0
    x = np.linspace(-0.999, 0.999, 101)
    for base in [Beta(*rng.uniform(0.5, 20, 2)) for _ in range(10)] + \
                [TruncExp(float(t)) for t in rng.uniform(0.05, 1.0, 5)]:
        lifted = SphericalMarginal(base, 3)
        sph = max(sph, float(np.abs(cdf(lifted, x) - cdf(base, x)).max()),
                  float(np.abs(density(lifted, x) - density(base, x)).max()))
    ok = exp_info <= 1e-10 and info_pair <= 1e-12 and sph <= 1e-9
    record(3, ok, f"expnce-infonce {exp_info:.1e}, infonce-pairwise {info_pair:.1e}, "
                  f"spherical n=3 {sph:.1e}")
    assert ok


# ------------------------------------------------------- default experiment runs

@pytest.fixture(scope="session")
def experiments(tmp_path_factory):
    """The default experiment (20000 BetaNCE steps) for each seed."""
    out = {}
    for seed in SEEDS:
        d = tmp_path_factory.mktemp(f"seed{seed}")
        out[seed] = (d, run_experiment(PipelineConfig(out_dir=str(d), seed=seed)))
    return out


@pytest.fixture(scope="session")
def seed0_artifacts(experiments):
    d = experiments[0][0]
    model, _ = load_model(d / "model.ckpt")
    index, _ = load_index(d / "index.bin")
    data = ingest(d / "data")
    q = model.encode_queries(data.query_text)
    return model, index, data, q, model.temperatures(q)


@pytest.mark.slow
def test_criterion_4_sweep_shape(seed0_artifacts):
    model, index, data, q, taus = seed0_artifacts
    ok, parts = True, []
    for mode in ("plain", "spherical"):
        table = cdf_sweep(index, model, data, SWEEP_P, mode, q, taus)
        rows = [np.asarray(table.rows[s]) for s in ("head", "torso", "tail")]
        monotone = all(np.all(np.diff(r) <= 0) for r in rows)
        ordered = bool(np.all(rows[0] >= rows[1]) and np.all(rows[1] >= rows[2]))
        ok &= monotone and ordered
        parts.append(f"{mode}: head {rows[0][0]:.0f}->{rows[0][-1]:.0f}, "
                     f"tail {rows[2][0]:.0f}->{rows[2][-1]:.0f}, monotone={monotone}, "
                     f"ordered={ordered}")
    record(4, ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_5_equal_k_comparison(experiments):
    ok, parts = True, []
    for seed in SEEDS:
        reps = experiments[seed][1].reports
        cdf_r, top, score = reps["cdf"].strata, reps["topk"].strata, reps["score"].strata
        recall_ok = all(cdf_r["all"].recall >= base["all"].recall - 0.005 for base in (top, score))
        tail_ok = cdf_r["tail"].precision > top["tail"].precision
        head_ok = cdf_r["head"].recall > top["head"].recall
        ok &= recall_ok and tail_ok and head_ok
        parts.append(f"seed {seed}: R {cdf_r['all'].recall:.3f} vs "
                     f"{top['all'].recall:.3f}/{score['all'].recall:.3f}, "
                     f"tail P {cdf_r['tail'].precision:.3f}>{top['tail'].precision:.3f}, "
                     f"head R {cdf_r['head'].recall:.3f}>{top['head'].recall:.3f}")
    record(5, ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_6_head_tail_histogram(seed0_artifacts):
    model, index, data, q, taus = seed0_artifacts
    ok, parts = True, []
    for mode in ("plain", "spherical"):
        hist = count_histogram(index, model, data, 0.985, mode, queries=q, taus=taus)
        head, tail = hist.means["head"], hist.means["tail"]
        ok &= head >= 2 * tail
        parts.append(f"{mode}: head {head:.1f} vs tail {tail:.1f}")
    record(6, ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_criterion_7_determinism(experiments, tmp_path):
    first = experiments[0][0]
    run_experiment(PipelineConfig(out_dir=str(tmp_path), seed=0))
    names = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    again = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    differing = [str(n) for n in names if (first / n).read_bytes() != (tmp_path / n).read_bytes()]
    ok = names == again and not differing
    record(7, ok, f"{len(names)} files compared, {len(differing)} differ")
    assert ok, differing


@pytest.mark.xfail(reason="both baselines already reach tail recall 1.0 on the default corpus",
                   strict=False)
@pytest.mark.slow
def test_tail_strict_dominance_example(experiments):
    reps = experiments[0][1].reports
    cdf_tail = reps["cdf"].strata["tail"]
    assert any(cdf_tail.precision > reps[b].strata["tail"].precision
               and cdf_tail.recall > reps[b].strata["tail"].recall for b in ("topk", "score"))


# ---------------------------------------------------------------- criterion 8

def _oracle_order(scores, id_rank, keep):
    """Indices with keep[i], ordered by score descending then id ascending."""
    idx = np.flatnonzero(keep)
    return idx[np.lexsort((id_rank[idx], -scores[idx]))]


def _plain_survival(t, tau):
    return 1.0 - ((1.0 + t) / 2.0) ** (1.0 / tau)


def test_criterion_8_retrieval_exactness():
    rng = np.random.default_rng(8)
    m, n = 10_000, 16
    emb = random_unit(rng, (m, n))
    dup = rng.choice(m, 1000, replace=False)
    emb[dup[:500]] = emb[dup[500:]]  # exact ties
    ids = [f"it{v:06d}" for v in rng.permutation(10 ** 6)[:m]]
    index = ItemIndex(emb, ids)
    id_rank = np.argsort(np.argsort(np.array(ids)))
    mismatches, mass_err = 0, 0.0
    for _ in range(1000):
        v = random_unit(rng, n)
        if rng.random() < 0.2:
            v = emb[rng.choice(dup[500:])]
        scores = emb @ v
        tau = float(rng.uniform(0.02, 0.5))
        k = int(rng.integers(1, 400))
        t = float(rng.uniform(-0.2, 0.6))
        p = float(rng.uniform(0.05, 0.999))
        checks = [(TopK(k), None), (ScoreThreshold(t), None),
                  (CdfCutoff(p, "plain"), tau), (CdfCutoff(p, "spherical"), tau)]
        for policy, tq in checks:
            got = retrieve(index, v, tq, policy)
            if isinstance(policy, TopK):
                want = _oracle_order(scores, id_rank, np.ones(m, bool))[:k]
            else:
                thr = policy.t if isinstance(policy, ScoreThreshold) else got.threshold_used
                want = _oracle_order(scores, id_rank, scores >= thr)
                if isinstance(policy, CdfCutoff):
                    dist = Beta(1 / tau, 1.0)
                    surv = (_plain_survival(thr, tau) if policy.mode == "plain"
                            else 1.0 - quadrature_cdf(SphericalMarginal(dist, n), thr))
                    mass_err = max(mass_err, abs(surv - p))
            same = (list(got.ids) == [ids[i] for i in want]
                    and np.array_equal(got.scores, scores[want]) and got.count == len(want))
            mismatches += not same
    ok = mismatches == 0 and mass_err <= 2e-3
    record(8, ok, f"4000 policy checks, {mismatches} mismatches, cdf tail-mass err {mass_err:.1e}")
    assert ok
