#pragma once

#include <stdexcept>
#include <string>

namespace kaft {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Schema violation, duplicate id, unreadable or unwritable file.
class DatasetError : public Error {
 public:
  using Error::Error;
};

// Unbound placeholder or malformed template file.
class TemplateError : public Error {
 public:
  using Error::Error;
};

// Transport failure, empty completion, unparseable model output.
class BackendError : public Error {
 public:
  using Error::Error;
};

// A construction step failed for one source record.
class ConstructionError : public Error {
 public:
  ConstructionError(std::string source_id, const std::string& what)
      : Error(source_id + ": " + what), source_id_(std::move(source_id)) {}
  const std::string& source_id() const noexcept { return source_id_; }

 private:
  std::string source_id_;
};

// Non-finite loss or parameters during training.
class TrainingError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace kaft
