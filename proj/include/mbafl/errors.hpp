#pragma once

#include <stdexcept>
#include <string>

namespace mbafl {

enum class ErrorKind {
  config,
  ingestion,
  shape,
  attacker_setup,
  aggregation,
  metric,
  resume,
  io,
  report,
};

const char* to_string(ErrorKind kind);

/// Base error for every failure the library reports. The kind decides the
/// CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MBAFL_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

MBAFL_DEFINE_ERROR(ConfigError, config)
MBAFL_DEFINE_ERROR(IngestionError, ingestion)
MBAFL_DEFINE_ERROR(ShapeError, shape)
MBAFL_DEFINE_ERROR(AttackerSetupError, attacker_setup)
MBAFL_DEFINE_ERROR(AggregationError, aggregation)
MBAFL_DEFINE_ERROR(MetricError, metric)
MBAFL_DEFINE_ERROR(ResumeError, resume)
MBAFL_DEFINE_ERROR(IoError, io)
MBAFL_DEFINE_ERROR(ReportError, report)

#undef MBAFL_DEFINE_ERROR

}  // namespace mbafl
