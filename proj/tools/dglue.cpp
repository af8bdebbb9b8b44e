// dglue command-line tool: synthetic sessions, label generation, training,
// matching, evaluation and the edge/runtime benchmark.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "dglue/error.hpp"
#include "dglue/eval.hpp"
#include "dglue/io.hpp"
#include "dglue/pipeline.hpp"

using namespace dglue;

namespace {

struct GraphOpts {
  int k_self = 10;
  int k_cross = 10;

  void add(CLI::App* app) {
    app->add_option("--k-self", k_self, "Self edges per keypoint")->capture_default_str();
    app->add_option("--k-cross", k_cross, "Cross edges per keypoint")->capture_default_str();
  }
  GraphConfig config() const {
    GraphConfig g;
    g.k_self = k_self;
    g.k_cross = k_cross;
    g.validate();
    return g;
  }
};

// ---------------------------------------------------------------- synth

struct SynthOpts {
  std::uint64_t seed = 0;
  std::string out;
  SynthConfig cfg;
  bool noiseless = false;
};

void add_synth(CLI::App& app, SynthOpts& o) {
  auto* c = app.add_subcommand("synth", "Generate a synthetic street session directory");
  c->add_option("--seed", o.seed, "RNG seed")->capture_default_str();
  c->add_option("--out", o.out, "Output session directory")->required();
  c->add_option("--frames", o.cfg.num_frames, "Number of frames")->capture_default_str();
  c->add_option("--keypoints", o.cfg.keypoints_per_frame, "Keypoints per frame")
      ->capture_default_str();
  c->add_option("--moving-fraction", o.cfg.moving_fraction,
                "Fraction of keypoints on moving instances")
      ->capture_default_str();
  c->add_option("--moving-instances", o.cfg.num_moving_instances, "Moving instances")
      ->capture_default_str();
  c->add_option("--static-instances", o.cfg.num_static_instances, "Parked instances")
      ->capture_default_str();
  c->add_option("--min-motion", o.cfg.min_motion, "Minimum mover displacement per frame [m]")
      ->capture_default_str();
  c->add_option("--max-motion", o.cfg.max_motion, "Maximum mover displacement per frame [m]")
      ->capture_default_str();
  c->add_option("--descriptor-dim", o.cfg.descriptor_dim, "Descriptor dimension")
      ->capture_default_str();
  c->add_option("--descriptor-noise", o.cfg.descriptor_noise, "Descriptor perturbation norm")
      ->capture_default_str();
  c->add_option("--jitter", o.cfg.keypoint_jitter, "Keypoint position noise std [px]")
      ->capture_default_str();
  c->add_option("--street-half-width", o.cfg.street_half_width, "Street half width [m]")
      ->capture_default_str();
  c->add_option("--camera-step", o.cfg.camera_step, "Forward motion per frame [m]")
      ->capture_default_str();
  c->add_flag("--noiseless", o.noiseless, "Exact keypoints and descriptors, no distractors");
  c->callback([&o] {
    SynthConfig cfg = o.noiseless ? o.cfg.noiseless() : o.cfg;
    const SynthScene scene = synth_scene(o.seed, cfg);
    write_session(o.out, scene.session, &scene.truth);
  });
}

// ------------------------------------------------------------- labelgen

struct LabelOpts {
  std::string session, out;
  int min_shared = 10;
  int stride = 1;
  LabelConfig label;
  MovingConfig moving;
  int threads = 1;
};

std::set<int> session_moving(const PoseGraphSession& session, const MovingConfig& cfg) {
  return classify_moving(session, cfg);
}

void add_labelgen(CLI::App& app, LabelOpts& o) {
  auto* c = app.add_subcommand("labelgen", "Generate pseudo-groundtruth labels for a session");
  c->add_option("--session", o.session, "Session directory")->required();
  c->add_option("--out", o.out, "Output labels JSON")->required();
  c->add_option("--min-shared", o.min_shared, "Minimum shared landmarks per query (c)")
      ->capture_default_str();
  c->add_option("--stride", o.stride, "Query stride over the second state (s)")
      ->capture_default_str();
  c->add_option("--match-radius", o.label.match_radius, "Coincidence radius for matches [px]")
      ->capture_default_str();
  c->add_option("--unmatched-radius", o.label.unmatched_radius,
                "Empty radius for non-matchable keypoints [px]")
      ->capture_default_str();
  c->add_option("--chamfer", o.moving.chamfer_threshold,
                "Chamfer distance above which an instance is moving [m]")
      ->capture_default_str();
  c->add_option("--threads", o.threads, "Worker threads")->capture_default_str();
  c->callback([&o] {
    const PoseGraphSession session = read_session(o.session);
    const auto queries = extract_queries(session, o.min_shared, o.stride);
    const auto moving = session_moving(session, o.moving);
    write_labels(o.out, generate_labels(session, queries, moving, o.label, o.threads));
  });
}

// ---------------------------------------------------------------- train

struct TrainOpts {
  std::vector<std::string> sessions, labels;
  std::string out, loss_csv, init;
  int embed_dim = 256;
  int rounds = 6;
  int heads = 4;
  bool compact = false;
  TrainConfig train;
  GraphOpts graph;
  int checkpoint_every = 0;
};

void add_train(CLI::App& app, TrainOpts& o) {
  auto* c = app.add_subcommand("train", "Train the matcher on labeled sessions");
  c->add_option("--session", o.sessions, "Session directory (repeatable)")->required();
  c->add_option("--labels", o.labels, "Labels JSON, one per --session")->required();
  c->add_option("--out", o.out, "Output weights (DGW1)")->required();
  c->add_option("--loss-csv", o.loss_csv, "Loss curve CSV (step,loss)");
  c->add_option("--init", o.init, "Initial weights (DGW1) instead of random init");
  c->add_option("--embed-dim", o.embed_dim, "Embedding dimension D")->capture_default_str();
  c->add_option("--rounds", o.rounds, "Self/cross rounds L")->capture_default_str();
  c->add_option("--heads", o.heads, "Attention heads")->capture_default_str();
  c->add_flag("--compact", o.compact, "MLP dims (2D, 2D, D) instead of (512, 512, 256)");
  c->add_option("--lr", o.train.learning_rate, "Adam learning rate")->capture_default_str();
  c->add_option("--batch", o.train.batch_size, "Pairs per batch")->capture_default_str();
  c->add_option("--steps", o.train.max_steps, "Optimizer steps")->capture_default_str();
  c->add_option("--seed", o.train.seed, "Initialization and shuffling seed")
      ->capture_default_str();
  c->add_option("--threads", o.train.threads, "Worker threads per batch")->capture_default_str();
  c->add_option("--checkpoint-every", o.checkpoint_every,
                "Write <out>.step<N> every N steps (0 = never)")
      ->capture_default_str();
  o.graph.add(c);
  c->callback([&o] {
    if (o.sessions.size() != o.labels.size()) {
      throw Error(ErrorKind::InvalidConfig, "--session and --labels counts differ");
    }
    const GraphConfig gcfg = o.graph.config();
    std::vector<TrainingSample> data;
    int desc_dim = 0;
    for (std::size_t s = 0; s < o.sessions.size(); ++s) {
      const PoseGraphSession session = read_session(o.sessions[s]);
      auto samples = training_samples(session, read_labels(o.labels[s]), gcfg, o.train.threads);
      for (auto& x : samples) {
        if (desc_dim != 0 && x.graph.descriptor_dim() != desc_dim) {
          throw Error(ErrorKind::ShapeMismatch, "descriptor dimensions differ across sessions");
        }
        desc_dim = x.graph.descriptor_dim();
        data.push_back(std::move(x));
      }
    }
    if (data.empty()) throw Error(ErrorKind::InvalidConfig, "no labeled pairs to train on");
    ModelParams init;
    if (!o.init.empty()) {
      init = load_weights(o.init);
    } else {
      ModelConfig mcfg;
      if (o.compact) {
        mcfg = ModelConfig::compact(desc_dim, o.embed_dim, o.rounds, o.heads);
      } else {
        mcfg.descriptor_dim = desc_dim;
        mcfg.embed_dim = o.embed_dim;
        mcfg.num_rounds = o.rounds;
        mcfg.num_heads = o.heads;
      }
      mcfg.validate();
      init = ModelParams::random(mcfg, o.train.seed);
    }
    auto on_step = [&o](int step, double, const ModelParams& p) {
      if (o.checkpoint_every > 0 && step % o.checkpoint_every == 0) {
        save_weights(p, o.out + ".step" + std::to_string(step));
      }
    };
    const TrainResult r = train(data, std::move(init), o.train, on_step, o.out + ".last_good");
    save_weights(r.params, o.out);
    if (!o.loss_csv.empty()) write_loss_csv(o.loss_csv, r.loss_curve);
  });
}

// ---------------------------------------------------------------- match

struct MatchOpts {
  std::string weights, pair, out;
  double tau = 0.1;
  bool dump_p = false;
  GraphOpts graph;
};

void add_match(CLI::App& app, MatchOpts& o) {
  auto* c = app.add_subcommand("match", "Match the two images of a pair file");
  c->add_option("--weights", o.weights, "Weights (DGW1)")->required();
  c->add_option("--pair", o.pair, "Pair JSON")->required();
  c->add_option("--tau", o.tau, "Assignment threshold")->capture_default_str();
  c->add_option("--out", o.out, "Output match JSON")->required();
  c->add_flag("--dump-p", o.dump_p, "Include the full assignment matrix P");
  o.graph.add(c);
  c->callback([&o] {
    const ModelParams params = load_weights(o.weights);
    const PairFile pair = read_pair_file(o.pair);
    ModelConfig cfg = params.config;
    cfg.assign_threshold = o.tau;
    const MatchResult r = forward(build_graph(pair.a, pair.b, o.graph.config()), params, cfg);
    write_text(o.out, match_result_json(r, o.dump_p));
  });
}

// ----------------------------------------------------------------- pair

struct PairOpts {
  std::string session, out;
  int a = 0, b = 1;
  MovingConfig moving;
};

void add_pair(CLI::App& app, PairOpts& o) {
  auto* c = app.add_subcommand("pair", "Export two session states as a pair file");
  c->add_option("--session", o.session, "Session directory")->required();
  c->add_option("--a", o.a, "First state")->capture_default_str();
  c->add_option("--b", o.b, "Second state")->capture_default_str();
  c->add_option("--chamfer", o.moving.chamfer_threshold,
                "Chamfer distance above which an instance is moving [m]")
      ->capture_default_str();
  c->add_option("--out", o.out, "Output pair JSON")->required();
  c->callback([&o] {
    const PoseGraphSession session = read_session(o.session);
    const ImageQuery q = make_query(session, o.a, o.b);
    const auto moving = session_moving(session, o.moving);
    PairFile p;
    p.state_a = o.a;
    p.state_b = o.b;
    p.a = session.states.at(o.a).frame;
    p.b = session.states.at(o.b).frame;
    p.T_b_a = q.T_b_a;
    p.moving_a = moving_keypoints(session.states[o.a], moving);
    p.moving_b = moving_keypoints(session.states[o.b], moving);
    write_pair_file(o.out, p);
  });
}

// ----------------------------------------------------------------- eval

struct EvalOpts {
  std::string session, pair, matches, weights, out, table;
  std::string matcher = "model";
  double tau = 0.1;
  int min_shared = 10;
  int stride = 1;
  EvalConfig eval;
  MovingConfig moving;
  LabelConfig label;
  GraphOpts graph;
};

std::vector<IndexPair> read_match_list(const std::string& path) {
  std::istringstream in(read_text(path));
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.contains("matches") || !j["matches"].is_array()) {
    throw Error(ErrorKind::ParseError, path + ": expected an object with a 'matches' array");
  }
  std::vector<IndexPair> out;
  for (const auto& m : j["matches"]) {
    if (!m.is_object() || !m.contains("a") || !m.contains("b")) {
      throw Error(ErrorKind::ParseError, path + ": match entries need 'a' and 'b'");
    }
    out.push_back({m["a"].get<int>(), m["b"].get<int>()});
  }
  return out;
}

void add_eval(CLI::App& app, EvalOpts& o) {
  auto* c = app.add_subcommand(
      "eval", "Evaluate a matcher on a session, or a match file on a pair file");
  c->add_option("--session", o.session, "Session directory");
  c->add_option("--pair", o.pair, "Pair JSON with relative_pose (use with --matches)");
  c->add_option("--matches", o.matches, "Match JSON from 'match' (use with --pair)");
  c->add_option("--matcher", o.matcher, "model | mutual-nn | groundtruth")
      ->check(CLI::IsMember({"model", "mutual-nn", "groundtruth"}))
      ->capture_default_str();
  c->add_option("--weights", o.weights, "Weights (DGW1) for --matcher model");
  c->add_option("--tau", o.tau, "Assignment threshold")->capture_default_str();
  c->add_option("--epipolar-threshold", o.eval.epipolar_threshold,
                "Correctness threshold on the symmetric epipolar distance (normalized)")
      ->capture_default_str();
  c->add_flag("--literal-kmov", o.eval.literal_k_mov,
              "K_mov counts all moving keypoints instead of matched ones");
  c->add_option("--min-shared", o.min_shared, "Minimum shared landmarks per query (c)")
      ->capture_default_str();
  c->add_option("--stride", o.stride, "Query stride over the second state (s)")
      ->capture_default_str();
  c->add_option("--chamfer", o.moving.chamfer_threshold,
                "Chamfer distance above which an instance is moving [m]")
      ->capture_default_str();
  c->add_option("--ransac-seed", o.eval.ransac.seed, "RANSAC seed")->capture_default_str();
  c->add_option("--threads", o.eval.threads, "Worker threads")->capture_default_str();
  c->add_option("--out", o.out, "Output report JSON")->required();
  c->add_option("--table", o.table, "Also write the aligned text table here");
  o.graph.add(c);
  c->callback([&o] {
    EvalReport rep;
    if (!o.pair.empty()) {
      if (o.matches.empty()) throw Error(ErrorKind::InvalidConfig, "--pair needs --matches");
      const PairFile p = read_pair_file(o.pair);
      if (!p.T_b_a) throw Error(ErrorKind::InvalidConfig, o.pair + " has no relative_pose");
      EvalPair e;
      e.state_a = p.state_a;
      e.state_b = p.state_b;
      e.a = &p.a;
      e.b = &p.b;
      e.T_b_a = *p.T_b_a;
      e.moving_a = p.moving_a.empty() ? std::vector<bool>(p.a.keypoints.size()) : p.moving_a;
      e.moving_b = p.moving_b.empty() ? std::vector<bool>(p.b.keypoints.size()) : p.moving_b;
      e.matches = read_match_list(o.matches);
      rep = evaluate(std::span<const EvalPair>(&e, 1), o.eval);
    } else {
      if (o.session.empty()) throw Error(ErrorKind::InvalidConfig, "need --session or --pair");
      const PoseGraphSession session = read_session(o.session);
      const auto queries = extract_queries(session, o.min_shared, o.stride);
      const auto moving = session_moving(session, o.moving);
      Matcher matcher;
      std::vector<MatchLabelSet> labels;
      if (o.matcher == "model") {
        if (o.weights.empty()) throw Error(ErrorKind::InvalidConfig, "--matcher model needs --weights");
        matcher = model_matcher(load_weights(o.weights), o.graph.config(), o.tau);
      } else if (o.matcher == "mutual-nn") {
        matcher = mutual_nn_matcher();
      } else {
        labels = generate_labels(session, queries, moving, o.label, o.eval.threads);
      }
      auto pairs = eval_pairs(session, queries, moving,
                              matcher ? matcher : Matcher([](const ImageFrame&, const ImageFrame&) {
                                return std::vector<IndexPair>{};
                              }),
                              o.eval.threads);
      if (!labels.empty()) {
        for (std::size_t k = 0; k < pairs.size(); ++k) pairs[k].matches = labels[k].matches;
      }
      rep = evaluate(pairs, o.eval);
    }
    write_text(o.out, rep.to_json());
    if (!o.table.empty()) write_text(o.table, rep.to_table());
    std::cout << rep.to_table();
  });
}

// ---------------------------------------------------------------- bench

struct BenchOpts {
  std::string out;
  std::vector<int> sizes{256, 512, 1024, 2048, 4096};
  std::uint64_t seed = 0;
  bool no_timing = false;
  GraphOpts graph;
};

ImageFrame random_frame(int n, int dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  ImageFrame f;
  f.camera.K << 500.0, 0.0, 319.5, 0.0, 500.0, 239.5, 0.0, 0.0, 1.0;
  f.camera.width = 640;
  f.camera.height = 480;
  for (int i = 0; i < n; ++i) {
    Keypoint k;
    k.position = Vec2(640.0 * u(rng), 480.0 * u(rng));
    k.descriptor = Eigen::VectorXd(dim);
    for (int c = 0; c < dim; ++c) k.descriptor(c) = g(rng);
    k.descriptor.normalize();
    k.index = i;
    f.keypoints.push_back(std::move(k));
  }
  return f;
}

void add_bench(CLI::App& app, BenchOpts& o) {
  auto* c = app.add_subcommand(
      "bench", "Edge counts and forward time of the default model per keypoint count");
  c->add_option("--out", o.out, "Output CSV (num_keypoints,cross_edges,self_edges,wall_seconds)")
      ->required();
  c->add_option("--sizes", o.sizes, "Keypoints per image")->capture_default_str();
  c->add_option("--seed", o.seed, "Seed for keypoints and weights")->capture_default_str();
  c->add_flag("--no-timing", o.no_timing, "Skip the forward pass; wall_seconds is 0");
  o.graph.add(c);
  c->callback([&o] {
    const GraphConfig gcfg = o.graph.config();
    const ModelConfig mcfg;
    const ModelParams params = ModelParams::random(mcfg, o.seed);
    std::mt19937_64 rng(o.seed);
    std::string csv = "num_keypoints,cross_edges,self_edges,wall_seconds\n";
    for (int n : o.sizes) {
      const ImageFrame a = random_frame(n, mcfg.descriptor_dim, rng);
      const ImageFrame b = random_frame(n, mcfg.descriptor_dim, rng);
      const auto t0 = std::chrono::steady_clock::now();
      const PairGraph g = build_graph(a, b, gcfg);
      if (!o.no_timing) forward(g, params);
      const double secs =
          o.no_timing ? 0.0
                      : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      char line[128];
      std::snprintf(line, sizeof line, "%d,%zu,%zu,%.6f\n", n, g.cross_edges.size(),
                    g.self_edges.size(), secs);
      csv += line;
    }
    write_text(o.out, csv);
  });
}

int exit_code(const Error& e) { return is_numerical(e.kind()) ? 2 : 1; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "dglue: sparse graph attention keypoint matching for dynamic scenes.\n"
      "Defaults: k_self = k_cross = 10, tau = 0.1, epipolar\n"
      "correctness 5e-4, non-matchable radius 50 px, moving threshold 5 m,\n"
      "learning rate 1e-4, batch 32.\n"
      "Exit codes: 0 ok, 1 input error, 2 numerical failure."};
  app.require_subcommand(1);
  SynthOpts synth;
  LabelOpts labelgen;
  TrainOpts train_opts;
  MatchOpts match;
  PairOpts pair;
  EvalOpts eval;
  BenchOpts bench;
  add_synth(app, synth);
  add_labelgen(app, labelgen);
  add_train(app, train_opts);
  add_match(app, match);
  add_pair(app, pair);
  add_eval(app, eval);
  add_bench(app, bench);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "error: usage\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
