#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dglue {

enum class ErrorKind {
  // core geometry
  InsufficientMatches,
  DegenerateConfiguration,
  DegenerateEpipolarLine,
  NonRigidPose,
  EmptyPointCloud,
  NoConsensus,
  // graph / model
  TooFewKeypoints,
  ShapeMismatch,
  DegenerateEmbeddings,
  // training
  IndexOutOfRange,
  NonFiniteGradient,
  NonFiniteLoss,
  // labels
  MissingDepth,
  EmptyInstanceObservation,
  InvalidConfig,
  // evaluation
  EmptyErrorList,
  // file formats
  ParseError,
  FormatError,
  IoError,
};

std::string_view to_string(ErrorKind kind);

// Numerical failures map to exit code 2 in the CLI, everything else to 1.
bool is_numerical(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace dglue
