#include "dglue/error.hpp"

namespace dglue {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InsufficientMatches: return "InsufficientMatches";
    case ErrorKind::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorKind::DegenerateEpipolarLine: return "DegenerateEpipolarLine";
    case ErrorKind::NonRigidPose: return "NonRigidPose";
    case ErrorKind::EmptyPointCloud: return "EmptyPointCloud";
    case ErrorKind::NoConsensus: return "NoConsensus";
    case ErrorKind::TooFewKeypoints: return "TooFewKeypoints";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DegenerateEmbeddings: return "DegenerateEmbeddings";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::MissingDepth: return "MissingDepth";
    case ErrorKind::EmptyInstanceObservation: return "EmptyInstanceObservation";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::EmptyErrorList: return "EmptyErrorList";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

bool is_numerical(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegenerateConfiguration:
    case ErrorKind::DegenerateEpipolarLine:
    case ErrorKind::NoConsensus:
    case ErrorKind::DegenerateEmbeddings:
    case ErrorKind::NonFiniteGradient:
    case ErrorKind::NonFiniteLoss:
      return true;
    default:
      return false;
  }
}

}  // namespace dglue
