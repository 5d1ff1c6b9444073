#pragma once

#include <stdexcept>
#include <string>

namespace unlearn {

enum class ErrorCode {
  InvalidArgument,
  EmptyForgetSet,
  TrainingDiverged,
  IncompleteTable,
  DegenerateTable,
  ContractViolation,
  Precondition,
  InvalidTask,
  Io,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised when a loss turns non-finite during training or unlearning.
class DivergedError : public Error {
 public:
  DivergedError(int epoch, const std::string& what)
      : Error(ErrorCode::TrainingDiverged, what + " (epoch " + std::to_string(epoch) + ")"),
        epoch_(epoch) {}

  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::EmptyForgetSet: return "empty-forget-set";
    case ErrorCode::TrainingDiverged: return "training-diverged";
    case ErrorCode::IncompleteTable: return "incomplete-table";
    case ErrorCode::DegenerateTable: return "degenerate-table";
    case ErrorCode::ContractViolation: return "contract-violation";
    case ErrorCode::Precondition: return "precondition";
    case ErrorCode::InvalidTask: return "invalid-task";
    case ErrorCode::Io: return "io";
  }
  return "unknown";
}

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace unlearn
