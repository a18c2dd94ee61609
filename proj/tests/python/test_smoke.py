# Copyright 2026 The Quadapter Authors
# SPDX-License-Identifier: Apache-2.0

import os
from pathlib import Path

import numpy as np
import pytest

import quadapter

SOURCE = Path(os.environ.get("QUADAPTER_SOURCE_DIR", Path(__file__).resolve().parents[2]))
TINY = SOURCE / "tests" / "cli" / "tiny.json"


def test_scale_offset_hand_case():
    assert quadapter.scale_offset(-3.0, 3.0, 2) == (2.0, 2)
    s, o = quadapter.scale_offset(-1.0, 1.0, 8)
    assert s == 2.0 / 255.0 and o == 128


def test_fake_quantize_two_bit():
    y = quadapter.fake_quantize(np.array([1.4, 3.7, -0.2]), 0.0, 3.0, bits=2)
    assert y.tolist() == [1.0, 3.0, 0.0]


def test_fake_quantize_keeps_shape_and_is_idempotent():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5))
    y = quadapter.fake_quantize(x, -2.0, 2.0, bits=4)
    assert y.shape == (4, 5)
    np.testing.assert_array_equal(quadapter.fake_quantize(y, -2.0, 2.0, bits=4), y)


def test_cle_equalizes_ranges():
    rng = np.random.default_rng(1)
    w1 = rng.normal(size=(6, 3)) * rng.uniform(0.1, 10.0, size=(6, 1))
    w2 = rng.normal(size=(4, 6))
    alpha, dead, _ = quadapter.init_cle(w1, w2)
    assert dead == []
    r1 = np.abs(alpha[:, None] * w1).max(axis=1)
    r2 = np.abs(w2 / alpha[None, :]).max(axis=0)
    np.testing.assert_allclose(r1, r2, rtol=1e-9)


def test_blob_hash():
    assert quadapter.git_blob_sha1(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_config_rejects_unknown_keys():
    cfg = quadapter.load_config(str(TINY))
    assert cfg["model"]["d_model"] == 16
    cfg["surprise"] = 1
    with pytest.raises(quadapter.QuadapterError, match="config"):
        quadapter.load_config(cfg)


def test_pipeline_round_trip(tmp_path):
    cfg = quadapter.load_config(str(TINY))
    # Without outlier surgery the quantized checkpoint must carry the FP weights unchanged.
    cfg["surgery"]["enabled"] = False
    ckpt, rows = quadapter.pretrain(cfg, tmp_path / "fp")
    assert {r["eval_corpus"] for r in rows} == {"A", "B"}
    qckpt, qrows = quadapter.quantize(cfg, ckpt, "quadapter_bc", "", tmp_path / "q")
    assert all(r["method"] == "quadapter_bc" and np.isfinite(r["ppl"]) for r in qrows)
    fp = quadapter.load_checkpoint(ckpt)
    q = quadapter.load_checkpoint(qckpt)
    for name, t in fp["tensors"].items():
        np.testing.assert_array_equal(t, q["tensors"][name])
    assert set(q["alpha"]) == {"blk0.ln1", "blk0.ln2", "ln_f"}
    assert quadapter.fold(qckpt, tmp_path / "folded.ckpt") == 0.0
    assert "qat_no_lsq" in quadapter.methods()
