"""Smoke test for the `gait` extension module.

Build and stage the module first:

    cargo build --release -p gait-py --features extension-module
    cp target/release/libgait_py.so python/gait.so

then run `python3 python/smoke.py`.
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import gait  # noqa: E402


def check(name, ok):
    print(f"{'ok' if ok else 'FAIL'}  {name}")
    return ok


def main():
    results = []

    a = [[1.0, 0.0], [0.0, 1.0]]
    b = [[1.0, 0.0], [1.0, 0.0]]
    results.append(check("cosine loss", math.isclose(gait.cosine_loss(a, b), -0.5)))
    results.append(check("stripe distance", gait.stripe_distance([[0.0, 0.0]], [[3.0, 4.0]]) == 5.0))

    embeddings = [[[float(i)]] for i in range(16)]
    labels = [i // 2 for i in range(16)]
    _, triplets, _ = gait.triplet_loss(embeddings, labels, 0.2)
    results.append(check("triplet count", triplets == 224))

    aligned = gait.align([[1.0] * 88 for _ in range(128)])
    results.append(check("alignment shape", len(aligned) == 64 and len(aligned[0]) == 44))

    cfg = gait.RunConfig(
        "preset = compact\ndata.protocol = all\npretrain.lr = 0.001\n"
        "synth.identities = 4\nsynth.sequences = 6\n"
        "pretrain.persons = 2\nfinetune.persons = 2\n"
    )
    data = gait.Dataset.synthetic(cfg)
    results.append(check("synthetic dataset", len(data) == 4 * 6 * 2))

    pre = gait.Pretrainer(cfg)
    stats = [pre.step(data) for _ in range(5)]
    results.append(check("pretrain steps", all(math.isfinite(s["loss"]) for s in stats)))

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "pre.ckpt")
        pre.save(ckpt)
        ft = gait.Finetuner(cfg, ckpt)
        out = ft.step(data)
        results.append(check("finetune step", out["triplets"] == 8 and math.isfinite(out["loss"])))
        means = ft.evaluate(data)
        results.append(check("evaluation", all(v is None or 0.0 <= v <= 1.0 for v in means.values())))
        results.append(check("cli usage error", gait.run_cli(["eval", "--checkpoint", os.path.join(tmp, "none")]) == 2))

    try:
        gait.RunConfig("model.wings = 2")
        results.append(check("unknown key rejected", False))
    except ValueError:
        results.append(check("unknown key rejected", True))

    print(f"{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
