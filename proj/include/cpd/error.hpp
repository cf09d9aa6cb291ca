// Copyright 2026 The cpd-toolkit Authors.
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

namespace cpd {

// Base for every error raised by the toolkit. Callers that only care about
// "something in the pipeline failed" catch this; tests match on the message.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorpusError : public Error {
 public:
  using Error::Error;
};

class ModelError : public Error {
 public:
  using Error::Error;
};

// Prompt does not fit the model context and no truncation was requested.
class SequenceOverflowError : public ModelError {
 public:
  using ModelError::ModelError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace cpd
