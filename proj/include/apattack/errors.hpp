#pragma once

#include <stdexcept>
#include <string>

namespace apattack {

// Every failure raised by the toolkit derives from Error so the CLI can
// report a single diagnostic line and exit nonzero.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class TemplateError : public Error {
 public:
  using Error::Error;
};

class TokenizationError : public Error {
 public:
  using Error::Error;
};

class NormalizationError : public Error {
 public:
  using Error::Error;
};

class BatchCompositionError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

// Raised when a training loss becomes non-finite; the message carries the
// batch index and every loss component.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace apattack
