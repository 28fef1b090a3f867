#!/usr/bin/env python3
"""Smoke test for the deen_py extension module.

Build the module and place it on sys.path first, e.g.:

    cargo build -p deen-py --release
    cp target/release/libdeen_py.so python/deen_py.so
    python3 python/smoke_test.py
"""

import math
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import deen_py


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        data = str(Path(tmp) / "data")
        n_train, n_test = deen_py.generate(
            data, num_identities=6, samples_per_id=4, height=16, width=8, seed=3
        )
        assert n_train == 4 * 2 * 4, n_train
        assert n_test == 2 * 2 * 4, n_test

        model = deen_py.DeenModel(
            num_identities=4,
            height=16,
            width=8,
            channels=[4, 4, 8, 8, 8],
            dee_stage=2,
            dee_branches=2,
            mfa_stages=[2],
            drop_stage4=True,
            reduction=2,
            seed=0,
        )
        assert model.embedding_dim() == 8
        assert any("dee" in n for n in model.param_names())
        assert any("mfa" in n for n in model.param_names())

        losses = model.fit(
            data, epochs=1, ids_per_batch=2, vis_per_id=2, ir_per_id=2,
            base_lr=1e-3, peak_lr=1e-2,
        )
        assert losses and all(math.isfinite(v) for v in losses), losses

        emb = model.embed([0.5] * (2 * 3 * 16 * 8), 16, 8, "VIS")
        assert len(emb) == 2 and len(emb[0]) == 8
        for row in emb:
            norm = math.sqrt(sum(v * v for v in row))
            assert abs(norm - 1.0) < 1e-9, norm

        metrics = model.evaluate(data, direction="ir-to-vis", trials=3, seed=0)
        assert 0.0 <= metrics["rank1"] <= metrics["rank10"] <= 1.0, metrics
        assert 0.0 <= metrics["map"] <= 1.0, metrics

        gap = model.distance_gap(data)
        assert math.isfinite(gap["gap"]), gap

        ckpt = str(Path(tmp) / "model.dckp")
        model.save(ckpt)
        again = deen_py.DeenModel.load(ckpt)
        emb2 = again.embed([0.5] * (3 * 16 * 8), 16, 8, "IR")
        assert len(emb2) == 1 and len(emb2[0]) == 8

    print("smoke test: OK")


if __name__ == "__main__":
    main()
