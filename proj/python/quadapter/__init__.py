# Copyright 2026 The Quadapter Authors
# SPDX-License-Identifier: Apache-2.0

"""Python access to the Quadapter core: quantizer, CLE, checkpoints, commands."""

from ._quadapter import (
    QuadapterError,
    fake_quantize,
    fold,
    git_blob_sha1,
    init_cle,
    load_checkpoint,
    load_config,
    methods,
    pretrain,
    quantize,
    scale_offset,
)

__all__ = [
    "QuadapterError",
    "fake_quantize",
    "fold",
    "git_blob_sha1",
    "init_cle",
    "load_checkpoint",
    "load_config",
    "methods",
    "pretrain",
    "quantize",
    "scale_offset",
]
