// Copyright 2026 The Sepkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace sepkit {

// Base class for all errors raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape or dimension mismatch. Always a caller bug.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration value, unknown key, or inconsistent preset.
struct ConfigError : Error {
  using Error::Error;
};

// Unreadable, malformed, or truncated input data (audio, manifests,
// checkpoints).
struct DataError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required (losses, gradients,
// parameters).
struct NumericError : Error {
  using Error::Error;
};

}  // namespace sepkit
