#include "mbafl/errors.hpp"

namespace mbafl {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return "config";
    case ErrorKind::ingestion: return "ingestion";
    case ErrorKind::shape: return "shape";
    case ErrorKind::attacker_setup: return "attacker_setup";
    case ErrorKind::aggregation: return "aggregation";
    case ErrorKind::metric: return "metric";
    case ErrorKind::resume: return "resume";
    case ErrorKind::io: return "io";
    case ErrorKind::report: return "report";
  }
  return "unknown";
}

}  // namespace mbafl
