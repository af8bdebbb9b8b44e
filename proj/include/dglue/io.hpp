#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dglue/eval.hpp"
#include "dglue/labels.hpp"
#include "dglue/model.hpp"
#include "dglue/synth.hpp"

namespace dglue {

// JSON artifacts carry "schema_version": 1. Descriptors are stored as hex
// strings of little-endian f64 values so that files round-trip bit-exactly.
// Parse and schema failures throw ParseError, file failures IoError.

std::string encode_descriptor(const Eigen::VectorXd& d);
Eigen::VectorXd decode_descriptor(const std::string& hex);

// Two images to be matched, optionally with the ground-truth relative pose
// and per-keypoint moving flags for evaluation.
struct PairFile {
  int state_a = 0;
  int state_b = 0;
  ImageFrame a, b;
  std::optional<RigidTransform> T_b_a;
  std::vector<bool> moving_a, moving_b;  // empty when unknown
};

void write_pair_file(const std::string& path, const PairFile& pair);
PairFile read_pair_file(const std::string& path);

// Session directory: session.json with states, keypoints and landmark
// tracks; depth_NNNN.bin (f32) and mask_NNNN.bin (u16) per state;
// groundtruth.json when the session is synthetic.
void write_session(const std::string& dir, const PoseGraphSession& session,
                   const SynthGroundTruth* truth = nullptr);
PoseGraphSession read_session(const std::string& dir);
std::optional<SynthGroundTruth> read_groundtruth(const std::string& dir);

void write_labels(const std::string& path, const std::vector<MatchLabelSet>& labels);
std::vector<MatchLabelSet> read_labels(const std::string& path);

std::string match_result_json(const MatchResult& result, bool dump_P);

void write_text(const std::string& path, const std::string& contents);
std::string read_text(const std::string& path);

}  // namespace dglue
