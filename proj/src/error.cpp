// Copyright 2026 The Quadapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "quadapter/error.hpp"

namespace quadapter {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kIndex: return "index error";
    case ErrorKind::kContract: return "contract error";
    case ErrorKind::kNonFinite: return "non-finite value";
    case ErrorKind::kDegenerateRange: return "degenerate range";
    case ErrorKind::kApplicability: return "applicability error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kTraining: return "training error";
    case ErrorKind::kSelfCheck: return "self-check failure";
  }
  return "error";
}

void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, std::string(to_string(kind)) + ": " + what);
}

}  // namespace quadapter
