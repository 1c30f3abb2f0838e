// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tspmn {

// Malformed input files, schema violations, dictionary/vocab mismatches.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite losses or gradients, failed gradient checks.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid arguments to library operations.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace tspmn
