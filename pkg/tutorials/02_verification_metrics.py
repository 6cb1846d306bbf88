"""Verification metrics without any training.

Shows how the pair protocols are built, what mined negatives do to accuracy,
how exact TPR@FPR differs from the coarse threshold sweep, and how consensus
group assignment behaves. Runs in seconds.

    python3 tutorials/02_verification_metrics.py
"""
import numpy as np

from frboost.evalbench.consensus import consensus_group
from frboost.evalbench.metrics import lfw_accuracy, roc_sweep, tpr_at_fpr
from frboost.evalbench.protocols import build_rbweb_protocol, build_rfw_style_protocol
from frboost.evalbench.report import evaluate
from frboost.evalbench.scoring import score_pairs

rng = np.random.default_rng(0)

# A fake world: each person has a centre in 32-d, each image is centre + noise.
# Image ids are strings; the "embedder" just looks the vectors up.
centres = {f"g{g}/p{p}": rng.normal(size=32) for g in (1, 2) for p in range(150)}
vectors, people = {}, {1: {}, 2: {}}
for person, c in centres.items():
    g = int(person[1])
    ids = [f"{person}/{k}" for k in range(6)]
    people[g][person] = ids
    for i in ids:
        vectors[i] = c + rng.normal(scale=0.9 if g == 1 else 1.3, size=32)  # group 2 is noisier


def stack(batch):
    return np.stack(batch)


# -- mined vs uniform negatives ---------------------------------------------
# The mining similarity sees the true vectors, so it picks look-alike pairs.
def true_similarity(a, b):
    va, vb = np.stack([vectors[i] for i in a]), np.stack([vectors[i] for i in b])
    return (va * vb).sum(1) / np.linalg.norm(va, axis=1) / np.linalg.norm(vb, axis=1)


uniform = build_rfw_style_protocol(people, 500, rng=1)  # random-similarity stub
mined = build_rfw_style_protocol(people, 500, true_similarity, rng=1)
for name, proto in (("uniform negatives", uniform), ("mined negatives", mined)):
    rep = evaluate(stack, proto, fpr_targets=(1e-2,), loader=vectors)
    accs = ", ".join(f"group {g}: {m['accuracy']:.2f}" for g, m in sorted(rep.per_group.items()))
    print(f"{name:18s} {accs}  (avg {rep.avg:.2f}, std {rep.std:.2f})")

# -- exact vs swept TPR@FPR ---------------------------------------------------
rb = build_rbweb_protocol(people, 150, 5, rng=2)
pos, neg = score_pairs(stack, rb, loader=vectors)[2]
print(f"\nimplicit protocol, group 2: {len(pos)} positives, {len(neg)} negatives")
for target in (1e-2, 1e-3, 1e-4):
    exact = tpr_at_fpr(pos, neg, target)
    swept = tpr_at_fpr(roc_sweep(pos, neg), fpr_target=target, mode="sweep")
    flag = "  (below resolution)" if exact.below_resolution else ""
    print(f"FPR {target:g}: exact TPR {exact.tpr:6.2f} at t={exact.threshold:.4f}, "
          f"sweep TPR {swept.tpr:6.2f} at t={swept.threshold:.2f}{flag}")

acc = lfw_accuracy(pos, neg[: len(pos)])  # balanced, like an explicit protocol
print(f"\n10-fold accuracy {acc.accuracy:.2f} (+- {acc.std:.2f}), best single threshold {acc.best_threshold_accuracy:.2f}")

# -- consensus -----------------------------------------------------------------
photos = [f"photo{i}" for i in range(30)]
for share in (0.95, 0.8, 0.7):
    votes = {p: (3 if i < share * len(photos) else 1) for i, p in enumerate(photos)}
    print(f"{int(share * 100)}% of photos say group 3 -> {consensus_group(photos, votes.get, rng=0)}")
print(f"13 photos -> {consensus_group(photos[:13], lambda _: 3)}")
