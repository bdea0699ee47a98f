"""Fast invariant battery behind the `selftest` CLI subcommand.

Each check exercises one contract the rest of the pipeline leans on and
returns (name, ok, detail). The battery is deterministic for a given seed
and finishes in a few seconds.
"""

from __future__ import annotations

import numpy as np

from . import dataset, model, selection, tensor, uncertainty

CHECK_SEED = 20240901


def _check_rng_determinism(seed):
    a = tensor.SeededRng(seed).uniform((64,))
    b = tensor.SeededRng(seed).uniform((64,))
    ok = np.array_equal(a, b)
    c = tensor.SeededRng(seed).fork(1).uniform((64,))
    ok = ok and not np.array_equal(a, c)
    return ok, "identical seeds replay, forks diverge"


def _check_softmax(seed):
    rng = tensor.SeededRng(seed)
    x = rng.gaussian((50, 5), sigma=3.0)
    p = tensor.softmax(x, axis=1)
    sums_ok = np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-6) and np.all(p >= 0)
    shifted = tensor.softmax(x + 7.5, axis=1)
    shift_ok = np.all(np.abs(p - shifted) < 1e-6)
    return bool(sums_ok and shift_ok), "simplex rows, shift invariant"


def _check_mean_std(seed):
    rng = tensor.SeededRng(seed)
    x = rng.uniform((7, 40))
    m1, s1 = tensor.mean_std(x, axis=1)
    perm = rng.permutation(40)
    m2, s2 = tensor.mean_std(x[:, perm], axis=1)
    ok = np.allclose(m1, m2, atol=1e-6) and np.allclose(s1, s2, atol=1e-6)
    mc, sc = tensor.mean_std(np.full(5, 0.7, np.float32), axis=0)
    ok = ok and abs(float(mc) - 0.7) < 1e-6 and float(sc) < 1e-6
    return bool(ok), "permutation invariant, constant slice std 0"


def _check_bernoulli_edges(seed):
    rng = tensor.SeededRng(seed)
    zeros = rng.bernoulli((1000,), 0.0)
    ones = rng.bernoulli((1000,), 1.0)
    return bool(not zeros.any() and ones.all()), "p=0 all zeros, p=1 all ones"


def _check_matmul(seed):
    rng = tensor.SeededRng(seed)
    a = rng.gaussian((5, 6))
    b = rng.gaussian((6, 4))
    got = tensor.matmul(a, b)
    ref = np.zeros((5, 4), dtype=np.float64)
    for i in range(5):
        for j in range(4):
            acc = 0.0
            for k in range(6):
                acc += float(a[i, k]) * float(b[k, j])
            ref[i, j] = acc
    return bool(np.array_equal(got, ref.astype(np.float32))), "matches triple-loop reference"


def _check_split_partition(seed):
    data = dataset.synth_generate([60, 40], seed=seed, grid_shape=(8, 8), snr_range=(0, 6))
    labeled, pool, test = dataset.split(data, dataset.SplitSpec(0.1, seed=seed, per_class_minimum=2))
    total = len(labeled) + len(pool) + len(test)
    ok = total == len(data)
    counts = np.concatenate([labeled.grids, pool.grids, test.grids]).reshape(total, -1)
    src = data.grids.reshape(len(data), -1)
    ok = ok and sorted(map(tuple, counts.tolist())) == sorted(map(tuple, src.tolist()))
    return bool(ok), "labeled/pool/test partition the source"


def _check_gate_reduction(seed):
    rng = tensor.SeededRng(seed)
    for trial in range(20):
        mean = tensor.softmax(rng.gaussian((30, 3), sigma=2.0), axis=1)
        std = rng.uniform((30, 3)) * 0.5
        summary = uncertainty.UncertaintySummary(mean, std, mean[None], std[None])
        cfg = selection.SelectionConfig(kappa_p=0.5, kappa_n=0.5, negative_learning=True)
        a = selection.select_uncertainty(summary, cfg)
        b = selection.select_confidence(mean, cfg)
        if not (np.array_equal(a.polarity, b.polarity) and np.array_equal(a.pseudo_label, b.pseudo_label)):
            return False, f"mismatch at trial {trial}"
    return True, "kappa=0.5 reduces to the confidence gate"


def _random_cube(rng, m=4, c=5, n=25, k=3):
    return tensor.softmax(rng.gaussian((m, c, n, k), sigma=2.0), axis=3)


def _check_vote_rules(seed):
    rng = tensor.SeededRng(seed)
    cube = _random_cube(rng)
    cfg = selection.SelectionConfig(gamma=0.5)
    mask = selection.vote(cube, cfg)
    mask.validate()
    if (mask.polarity == -1).any():
        return False, "negatives emitted with negative learning off"
    perm = rng.permutation(cube.shape[0])
    mask_p = selection.vote(cube[perm], cfg)
    if not np.array_equal(mask.polarity, mask_p.polarity):
        return False, "model order changed the vote"
    rows = np.flatnonzero(mask.selected_rows)
    if len(rows):
        # flipping one model's argmax on a selected sample must deselect it
        i = int(rows[0])
        broken = cube.copy()
        k = cube.shape[3]
        cls = int(mask.pseudo_label[i])
        other = (cls + 1) % k
        broken[0, :, i, :] = 0.01
        broken[0, :, i, other] = 0.99
        if selection.vote(broken, cfg).pseudo_label[i] != -1:
            return False, "non-unanimous sample stayed selected"
    return True, "unanimity required, order invariant"


def _check_gamma_monotone(seed):
    rng = tensor.SeededRng(seed)
    for trial in range(10):
        cube = _random_cube(rng.fork(trial), n=60)
        counts = [
            selection.vote(cube, selection.SelectionConfig(gamma=g)).n_selected()
            for g in (0.7, 0.9, 0.99)
        ]
        if not counts[2] <= counts[1] <= counts[0]:
            return False, f"counts {counts} not monotone at trial {trial}"
    return True, "|selected| non-increasing in gamma"


def _check_ece(seed):
    rng = tensor.SeededRng(seed)
    probs = tensor.softmax(rng.gaussian((200, 4), sigma=2.0), axis=1)
    labels = (rng.uniform((200,)) * 4).astype(np.int64)
    val = uncertainty.ece(probs, labels, bins=10)
    if not 0.0 <= val <= 1.0:
        return False, f"ece {val} out of [0, 1]"
    perfect = np.zeros((50, 2), np.float32)
    perfect[:, 0] = 1.0
    if uncertainty.ece(perfect, np.zeros(50, np.int64), bins=10) != 0.0:
        return False, "perfectly calibrated input gave nonzero ece"
    return True, "bounded, zero on calibrated input"


def _check_gradients(seed):
    st = model.init_classifier(64, 2, dropout_rate=0.0, seed=seed)
    st64 = st.copy()
    st64.params = {k: v.astype(np.float64) for k, v in st64.params.items()}
    rng = tensor.SeededRng(seed)
    x = rng.gaussian((6, 64)).astype(np.float64)
    t = np.zeros((6, 2), np.float32)
    t[np.arange(6), (rng.uniform((6,)) * 2).astype(int)] = 1.0
    _, grads = model.loss_and_grads(st64, x, t)
    eps = 1e-3
    probes = 0
    for name in model.PARAM_ORDER:
        w = st64.params[name]
        flat = w.reshape(-1)
        for pos in range(0, flat.size, max(1, flat.size // 3)):
            old = flat[pos]
            flat[pos] = old + eps
            lp, _ = model.loss_and_grads(st64, x, t)
            flat[pos] = old - eps
            lm, _ = model.loss_and_grads(st64, x, t)
            flat[pos] = old
            fd = (lp - lm) / (2 * eps)
            an = grads[name].reshape(-1)[pos]
            if abs(fd - an) > 1e-4 * max(1.0, abs(fd)):
                return False, f"{name}[{pos}]: fd {fd:.6g} vs analytic {an:.6g}"
            probes += 1
    return True, f"{probes} finite-difference probes agree"


def _check_dropout_stats(seed):
    rng = tensor.SeededRng(seed)
    rate = 0.3
    mask = model.make_dropout_mask(rng, (10000,), rate)
    frac = float((mask == 0).mean())
    sigma = np.sqrt(rate * (1 - rate) / 10000)
    if abs(frac - rate) > 3 * sigma:
        return False, f"zero fraction {frac:.4f} vs rate {rate}"
    survivors = np.unique(mask[mask > 0])
    if not np.allclose(survivors, 1.0 / (1 - rate), atol=1e-6):
        return False, "survivors not scaled by 1/(1-rate)"
    return True, "zero fraction within 3 sigma, inverted scaling"


CHECKS = [
    ("rng-determinism", _check_rng_determinism),
    ("softmax", _check_softmax),
    ("mean-std", _check_mean_std),
    ("bernoulli-edges", _check_bernoulli_edges),
    ("matmul-reference", _check_matmul),
    ("split-partition", _check_split_partition),
    ("gate-reduction", _check_gate_reduction),
    ("vote-rules", _check_vote_rules),
    ("gamma-monotone", _check_gamma_monotone),
    ("ece", _check_ece),
    ("gradients", _check_gradients),
    ("dropout-stats", _check_dropout_stats),
]


def run_selftests(seed: int = CHECK_SEED) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
