#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace distil {

// Base of every error the library raises. kind() is a stable, machine-parsable
// class name used by the command line front end.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual std::string_view kind() const noexcept { return "error"; }
  // Errors caused by bad input or configuration rather than a failure while
  // doing the work.
  virtual bool is_usage() const noexcept { return false; }
};

#define DISTIL_DEFINE_ERROR(Name, Kind, Usage)                                \
  class Name : public Error {                                                 \
   public:                                                                    \
    using Error::Error;                                                       \
    std::string_view kind() const noexcept override { return Kind; }          \
    bool is_usage() const noexcept override { return Usage; }                 \
  };

DISTIL_DEFINE_ERROR(DimensionError, "dimension", false)
DISTIL_DEFINE_ERROR(ConfigError, "config", true)
DISTIL_DEFINE_ERROR(UsageError, "usage", true)
DISTIL_DEFINE_ERROR(VocabError, "vocab", false)
DISTIL_DEFINE_ERROR(IngestionError, "ingestion", true)
DISTIL_DEFINE_ERROR(DataError, "data", true)
DISTIL_DEFINE_ERROR(EvaluationError, "evaluation", false)
DISTIL_DEFINE_ERROR(NoSupervisedPositions, "no-supervised-positions", false)
DISTIL_DEFINE_ERROR(CheckpointCorrupt, "checkpoint-corrupt", true)
DISTIL_DEFINE_ERROR(CheckpointHashMismatch, "checkpoint-hash-mismatch", true)
DISTIL_DEFINE_ERROR(CheckpointShapeMismatch, "checkpoint-shape-mismatch", true)
DISTIL_DEFINE_ERROR(IncompatibleModels, "incompatible-models", true)
DISTIL_DEFINE_ERROR(IoError, "io", false)

#undef DISTIL_DEFINE_ERROR

}  // namespace distil
